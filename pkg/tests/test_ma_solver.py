import math
from fractions import Fraction

import numpy as np
import pytest

from strategies import langevin_root
from toriccone.errors import InvalidAngles, NonConvexIterate, ValidationError
from toriccone.ma_solver import (SolveConfig, compare_with_oracle, default_box, identity_check,
                                 ode_oracle_1d, residual, setup_problem, solve_continuity, volume_check)
from toriccone.moments import weighted_barycenter
from toriccone.polytope import example_eps_polytope, interval, simplex
from toriccone.transform import GridPotential, legendre_to_x

pytestmark = pytest.mark.filterwarnings("ignore::toriccone.invariants.ConeAngleWarning")

X = np.linspace(-0.9, 0.9, 361)


def football(alpha, x, sign=-1):
    """Closed-form conical KE potential on [-1, 1] with tau = 0."""
    return ((1 + x) * np.log(1 + x) + (1 - x) * np.log(1 - x) + sign * math.log(2 / alpha)) / alpha


@pytest.mark.parametrize("alpha", [1.0, 0.75, 0.5])
def test_football_substitution(alpha):
    # u'' = exp(-alpha u + alpha x u') holds only with the minus sign
    h = 1e-4
    def defect(sign):
        u = lambda x: football(alpha, x, sign)
        upp = (u(X + h) - 2 * u(X) + u(X - h)) / h ** 2
        up = (u(X + h) - u(X - h)) / (2 * h)
        return np.max(np.abs(np.log(upp) - (-alpha * u(X) + alpha * X * up)))
    assert defect(-1) < 1e-6
    assert defect(+1) > 1.0


def test_setup_examples():
    p = setup_problem(interval(), 1.0, [0.0], (None, 64))
    assert p.c[0] == 0.0
    np.testing.assert_allclose(p.beta, [1, 1])
    p = setup_problem(interval(), 0.5, [0.0], (None, 64))
    np.testing.assert_allclose(p.beta, [0.5, 0.5])
    p = setup_problem(interval(), 0.5, [0.2], (None, 64))
    np.testing.assert_allclose(p.beta, [0.6, 0.4], atol=1e-15)
    assert p.c[0] == pytest.approx(0.615, abs=1e-3)
    assert p.c[0] == pytest.approx(langevin_root(0.2), abs=1e-11)
    assert abs(weighted_barycenter(interval(), p.c)[0] - 0.2) < 1e-12
    # barycenter default gives the Einstein case
    p = setup_problem(simplex(2), 0.5, None, (None, 17))
    assert np.all(p.c == 0) and p.s == 0.5


def test_setup_rejects_bad_data():
    with pytest.raises(InvalidAngles):
        setup_problem(interval(), 1.0, [0.2], (None, 64))
    with pytest.raises(InvalidAngles):
        setup_problem(interval(), 0.5, [1.0], (None, 64))
    with pytest.raises(ValidationError):
        setup_problem(interval(), 0.0, [0.0], (None, 64))
    with pytest.raises(ValidationError):
        setup_problem(interval(), 0.5, [0.0], (None, 64), order=3)


def test_default_box_covers_decay_region():
    R, center = default_box(interval(), 0.5, [0.0])
    assert R == pytest.approx(math.log(1e8) / 0.5) and center == (0.0,)
    R, center = default_box(interval(), 0.5, [0.2])
    # polar vertices -v_j / l_j(tau): -1/1.2 and 1/0.8
    assert R == pytest.approx(0.5 * math.log(1e8) / 0.5 * (1 / 1.2 + 1 / 0.8))


@pytest.mark.parametrize("alpha", [1.0, 0.75, 0.5])
def test_closed_form_solutions(alpha):
    p = setup_problem(interval(), alpha, [0.0], (None, 1024))
    rep = solve_continuity(p)
    u = legendre_to_x(rep.phi, X[:, None]).u
    assert np.max(np.abs(u - football(alpha, X))) <= 1e-4
    assert rep.residual_sup <= 1e-7
    assert all(st.residual_sup <= 1e-7 for st in rep.steps)
    assert [st.s for st in rep.steps] == pytest.approx(np.linspace(0, alpha, 9))


@pytest.mark.parametrize("alpha, f", [(1.0, -math.log(2)), (0.5, -2 * math.log(4))])
def test_oracle_constant_smooth_part(alpha, f):
    o = ode_oracle_1d(setup_problem(interval(), alpha, [0.0], (None, 64)))
    np.testing.assert_allclose(o.f, f, atol=1e-10)


def test_oracle_soliton_against_solver():
    p = setup_problem(interval(), 0.5, [0.2], (None, 1024))
    o = ode_oracle_1d(p)
    assert np.ptp(o.f) > 0.01
    assert o.residual <= 1e-10
    assert compare_with_oracle(solve_continuity(p), o)["sup"] <= 1e-4


@pytest.mark.parametrize("order, rate", [(2, 1.8), (4, 3.0)])
def test_refinement_order(order, rate):
    errs = []
    for m in (64, 128, 256):
        p = setup_problem(interval(), 0.5, [0.2], (None, m), order=order)
        errs.append(compare_with_oracle(solve_continuity(p), ode_oracle_1d(p))["sup"])
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= rate), orders


def test_residual_of_reference_and_nonconvex_input():
    p = setup_problem(interval(), 1.0, [0.0], (None, 256))
    # the exact solution is phi_hat + log 2, held as a deviation from phi_hat
    exact = GridPotential(p.grid, p.reference.values + math.log(2), base=p.reference,
                          deviation=np.zeros(p.grid.shape), meta={"deviation_offset": math.log(2)})
    assert residual(p, exact).sup_norm < 1e-8
    # phi_hat itself leaves the constant defect alpha log 2 at every s
    for s in (0.0, 0.5, 1.0):
        r = residual(p, p.reference, s=s)
        assert r.sup_norm == pytest.approx(math.log(2), rel=1e-9)
        assert np.all(np.isfinite(r.field[p.interior]))
    bumpy = GridPotential(p.grid, p.reference.values - 40 * np.exp(-p.grid.points()[..., 0] ** 2))
    with pytest.raises(NonConvexIterate) as err:
        residual(p, bumpy)
    assert len(err.value.nodes) > 0


def test_identity_check_cases():
    p = setup_problem(interval(), 1.0, [0.0], (None, 1024))
    rep = solve_continuity(p)
    assert np.all(np.abs(identity_check(p, rep.phi)) < 1e-6)
    # symmetric polytope, symmetric potential: zero without solving
    q = setup_problem(simplex(2), 0.5, None, (None, 33))
    assert np.all(np.abs(identity_check(q, q.reference)) < 1e-12)
    # phi_hat makes the integrand an exact derivative, so only a perturbed potential is flagged
    r = setup_problem(example_eps_polytope(Fraction(1, 2)), 0.5, None, (None, 65))
    assert np.max(np.abs(identity_check(r, r.reference))) < 1e-5
    rho = r.grid.points() - np.array(r.grid.center)
    bump = np.exp(-np.sum((rho - [3.0, -1.0]) ** 2, axis=-1) / 20)
    wrong = GridPotential(r.grid, r.reference.values + bump)
    assert np.max(np.abs(identity_check(r, wrong))) > 1e-3


def test_volume_check_and_truncation():
    p = setup_problem(interval(), 1.0, [0.0], (None, 1024))
    assert volume_check(p, solve_continuity(p).phi) == pytest.approx(2.0, rel=1e-2)
    errs = []
    for K in (4.0, 8.0, 16.0):
        q = setup_problem(example_eps_polytope(Fraction(1, 2)), 0.5, None, (None, 129), K=K)
        errs.append(abs(volume_check(q, q.reference) - 2.0))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2


def test_uniqueness_from_perturbed_starts():
    p = setup_problem(interval(), 0.5, [0.2], (None, 512))
    base = solve_continuity(p)
    rho = p.grid.points()[..., 0]
    for amp in (0.05, -0.08):
        rep = solve_continuity(p, SolveConfig(initial_psi=amp * np.exp(-rho ** 2 / 4)))
        assert rep.warm_start == "accepted"
        assert np.max(np.abs(rep.phi.values - base.phi.values)[p.domain]) < 1e-6


def test_cone_angle_recovery():
    p = setup_problem(interval(), 0.5, [0.2], (None, 512))
    rep = solve_continuity(p)
    l = np.linspace(0.02, 0.2, 40)  # [0.01, 0.1] times the diameter 2
    A = np.column_stack([l * np.log(l), np.ones_like(l), l, l ** 2])
    for j, x in enumerate((l - 1, 1 - l)):
        coef = np.linalg.lstsq(A, legendre_to_x(rep.phi, x[:, None]).u, rcond=None)[0]
        assert coef[0] == pytest.approx(1 / p.beta[j], rel=0.05)


@pytest.mark.slow
def test_projective_plane():
    p = setup_problem(simplex(2), 1.0)
    rep = solve_continuity(p)
    d = rep.diagnostics
    assert rep.residual_sup <= 1e-6
    assert d["volume"] == pytest.approx(4.5, rel=1e-2)
    assert max(abs(g) for g in d["identity"]) <= 1e-5
    assert d["moment_image"]["gap"] <= 2 * p.grid.h
    assert rep.to_dict()["warm_start"] == "none"
