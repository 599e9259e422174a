from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, minimize_scalar

from duality import duality_errors
from strategies import delzant_polygons, random_delzant
from toriccone.errors import EvaluationOutsideDomain, ValidationError
from toriccone.polytope import example_eps_polytope, interval, simplex
from toriccone.transform import (Grid, GridPotential, SmoothPart, SymplecticPotential, central_differences,
                                 guillemin_potential, invert_gradient, legendre_to_rho, legendre_to_x,
                                 moment_map_image)

TRI = simplex(2)


def test_guillemin_interval_and_triangle():
    u = guillemin_potential(interval(), [1.0, 1.0])
    assert u.value([0.0]) == pytest.approx(0.0, abs=1e-15)
    assert u.hessian([0.0])[0, 0] == pytest.approx(2.0)
    assert guillemin_potential(interval(), [0.5, 0.5]).hessian([0.0])[0, 0] == pytest.approx(4.0)
    assert u.value([1.0]) == pytest.approx(2 * np.log(2))
    np.testing.assert_allclose(guillemin_potential(TRI, [1, 1, 1]).hessian([0.0, 0.0]), [[2, 1], [1, 2]])


def test_potential_rejects_bad_input():
    with pytest.raises(ValidationError):
        guillemin_potential(TRI, [1.0, 1.0])
    with pytest.raises(ValidationError):
        guillemin_potential(TRI, [1.0, 0.0, 1.0])
    with pytest.raises(EvaluationOutsideDomain):
        guillemin_potential(TRI, [1, 1, 1]).value([2.0, 2.0])
    with pytest.raises(EvaluationOutsideDomain):
        guillemin_potential(TRI, [1, 1, 1]).gradient([-1.0, 0.0])


def test_smooth_part_is_added():
    f = SmoothPart(lambda x: np.sum(np.asarray(x) ** 2, axis=-1),
                   lambda x: 2 * np.asarray(x),
                   lambda x: 2 * np.broadcast_to(np.eye(1), np.shape(x)[:-1] + (1, 1)))
    u = SymplecticPotential(interval(), [1.0, 1.0], smooth=f)
    assert u.value([0.5]) == pytest.approx(guillemin_potential(interval(), [1, 1]).value([0.5]) + 0.25)
    assert u.hessian([0.0])[0, 0] == pytest.approx(4.0)


@settings(max_examples=30, deadline=None)
@given(delzant_polygons(max_cuts=2), st.integers(0, 2**32 - 1))
def test_derivatives_by_finite_differences(P, seed):
    rng = np.random.default_rng(seed)
    beta = rng.uniform(0.2, 1.0, P.N)
    u = guillemin_potential(P, beta)
    bary = np.array([float(t) for t in P.barycenter])
    V = P.vertex_array()
    x = bary + 0.7 * rng.uniform() * (V[rng.integers(len(V))] - bary)
    h = 1e-6
    g, H = u.gradient(x), u.hessian(x)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        assert (u.value(x + e) - u.value(x - e)) / (2 * h) == pytest.approx(g[k], rel=1e-6, abs=1e-7)
        np.testing.assert_allclose((u.gradient(x + e) - u.gradient(x - e)) / (2 * h), H[k], rtol=1e-6, atol=1e-6)


def test_interval_legendre_transform():
    u = guillemin_potential(interval(), [1.0, 1.0])
    phi = legendre_to_rho(u, Grid(1, 20.0, 401))
    rho = phi.grid.axes[0]
    assert phi.values[200] == pytest.approx(0.0, abs=1e-14)
    # sup at x -> 1 where u = 2 log 2
    assert phi.values[-1] - rho[-1] == pytest.approx(-2 * np.log(2), abs=1e-7)
    np.testing.assert_allclose(phi.values, phi.values[::-1], atol=1e-12)
    # closed form: phi = 2 log cosh(rho/2)
    np.testing.assert_allclose(phi.values, 2 * np.log(np.cosh(rho / 2)), atol=1e-12)


def test_triangle_origin_and_scipy_oracle():
    u = guillemin_potential(TRI, [1, 1, 1])
    phi = legendre_to_rho(u, Grid(2, 3.0, 31))
    assert phi.values[15, 15] == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(phi.gradient[15, 15], [0, 0], atol=1e-13)
    pts = phi.grid.points()
    for i, j in [(3, 27), (20, 5), (30, 30), (0, 11)]:
        rho = pts[i, j]
        obj = lambda x: -np.inf if np.any(TRI.values(x) <= 0) else x @ rho - u.value(x)
        res = minimize(lambda x: -obj(x) if np.isfinite(obj(x)) else 1e10, phi.gradient[i, j] * 0.5,
                       method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        assert phi.values[i, j] == pytest.approx(-res.fun, abs=1e-9)


def test_invert_gradient_batch():
    P = example_eps_polytope(Fraction(1, 2))
    u = guillemin_potential(P, [0.5, 0.7, 0.9, 1.0])
    rho = np.array([[0.0, 0.0], [15.0, -4.0], [-12.0, -12.0], [5.0, 14.0]])
    x = invert_gradient(u, rho)
    np.testing.assert_allclose(u.gradient(x), rho, atol=1e-8)
    assert np.all(P.values(x) > 0)


def test_one_dimensional_biconjugate():
    u = guillemin_potential(interval(), [0.6, 0.9])
    phi = legendre_to_rho(u, Grid(1, 25.0, 801))
    x = np.linspace(-0.95, 0.95, 39)[:, None]
    s = legendre_to_x(phi, x)
    np.testing.assert_allclose(s.u, u.value(x), atol=1e-7)
    assert np.all(np.isfinite(s.error))
    ref = [-minimize_scalar(lambda r: -(xx * r - 2 * np.log(np.cosh(r / 2))), bounds=(-40, 40),
                            method="bounded", options={"xatol": 1e-12}).fun for xx in x[:, 0]]
    np.testing.assert_allclose(ref, guillemin_potential(interval(), [1, 1]).value(x), atol=1e-9)


def test_two_dimensional_biconjugate_and_affine_shift():
    u = guillemin_potential(TRI, [0.8, 1.0, 0.6])
    grid = Grid(2, 8.0, 257)
    phi = legendre_to_rho(u, grid)
    x = np.array([[0.0, 0.0], [0.4, -0.3], [-0.5, 0.9], [1.1, -0.6]])
    s = legendre_to_x(phi, x)
    np.testing.assert_allclose(s.u, u.value(x), atol=1e-6)
    # phi + a.rho is the transform of u(. - a)
    a = np.array([0.3, -0.2])
    shifted = GridPotential(grid, phi.values + grid.points() @ a)
    s2 = legendre_to_x(shifted, x + a)
    np.testing.assert_allclose(s2.u, u.value(x), atol=1e-6)


def test_conjugate_flags_max_on_box_boundary():
    u = guillemin_potential(interval(), [1.0, 1.0])
    phi = legendre_to_rho(u, Grid(1, 4.0, 81))
    s = legendre_to_x(phi, [[0.99999], [0.0]])
    assert np.isinf(s.error[0]) and np.isfinite(s.error[1])


def test_moment_map_image_gap_shrinks():
    u = guillemin_potential(TRI, [1, 1, 1])
    gaps = [moment_map_image(legendre_to_rho(u, Grid(2, R, 65)), TRI).gap for R in (4.0, 8.0, 16.0)]
    assert gaps[0] > gaps[1] > gaps[2]
    rep = moment_map_image(legendre_to_rho(u, Grid(2, 16.0, 65)), TRI)
    assert rep.outside == 0.0 and rep.min_facet_value > 0
    # a quadratic has unbounded gradient image, far outside the triangle
    grid = Grid(2, 16.0, 65)
    quad = GridPotential(grid, 0.5 * np.sum(grid.points() ** 2, axis=-1))
    assert moment_map_image(quad, TRI).gap > 5


def test_central_differences_exact_on_quadratics():
    grid = Grid(2, 1.0, 11)
    p = grid.points()
    a = p[..., 0] ** 2 + 3 * p[..., 0] * p[..., 1] - p[..., 1]
    g, H = central_differences(a, grid.h, reflect=False)
    np.testing.assert_allclose(H[1:-1, 1:-1], np.broadcast_to([[2, 3], [3, 0]], (9, 9, 2, 2)), atol=1e-10)
    np.testing.assert_allclose(g[1:-1, 1:-1, 1], 3 * p[1:-1, 1:-1, 0] - 1, atol=1e-12)
    assert np.isnan(g[0, 0]).all()
    g, _ = central_differences(a, grid.h, reflect=True)
    assert np.isfinite(g).all()


@pytest.mark.parametrize("n", [1, 2])
def test_serialization_round_trip(tmp_path, n):
    P = interval() if n == 1 else TRI
    grid = Grid(n, 3.0, 17, (0.5,) * n)
    phi = legendre_to_rho(guillemin_potential(P, [0.7] * P.N), grid)
    phi.to_binary(tmp_path / "p.bin")
    b = GridPotential.from_binary(tmp_path / "p.bin")
    assert b.grid == grid
    np.testing.assert_array_equal(b.values, phi.values)
    phi.to_csv(tmp_path / "p.csv")
    c = GridPotential.from_csv(tmp_path / "p.csv")
    assert c.grid.m == 17 and c.grid.R == pytest.approx(3.0)
    np.testing.assert_allclose(c.grid.center, grid.center)
    np.testing.assert_array_equal(c.values, phi.values)


def test_grid_validation():
    with pytest.raises(ValidationError):
        Grid(2, 1.0, 3)
    with pytest.raises(ValidationError):
        Grid(2, 1.0, 9, (0.0,))
    with pytest.raises(ValidationError):
        legendre_to_rho(guillemin_potential(TRI, [1, 1, 1]), Grid(1, 1.0, 9))


def test_discrete_duality_on_random_polytopes():
    rng = np.random.default_rng(3)
    for _ in range(3):
        P = random_delzant(rng, 2)
        err = duality_errors(P, rng.uniform(0.3, 1.0, P.N), m=256)
        assert err["fenchel_young"] <= 5e-3
        assert err["gradient"] <= err["h"]
        assert err["hessian"] <= err["h"]
        assert err["biconjugate"] <= err["h"] ** 2
        assert err["used"] > 0.9 * (err["used"] + err["dropped"])
