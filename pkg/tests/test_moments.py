import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import dblquad

from strategies import delzant_polygons
from toriccone.errors import DegenerateSimplex
from toriccone.moments import exp_divided_difference, exp_moments, simplex_exp_integral, weighted_barycenter
from toriccone.polytope import Polytope, example_eps_polytope, interval, simplex

TRI = simplex(2)


def test_simplex_integral_closed_forms():
    assert simplex_exp_integral([[0.0], [1.0]], [1.0]) == pytest.approx(math.e - 1, rel=1e-13)
    tri = [[0, 0], [1, 0], [0, 1]]
    assert simplex_exp_integral(tri, [0.0, 0.0]) == pytest.approx(0.5, rel=1e-14)
    # int_0^1 e^x (e^{1-x} - 1) dx = 1
    assert simplex_exp_integral(tri, [1.0, 1.0]) == pytest.approx(1.0, rel=1e-13)


def test_simplex_integral_against_adaptive_quadrature():
    tri = np.array([[0.2, -0.1], [1.3, 0.4], [-0.5, 0.9]])
    c = np.array([0.7, -1.9])
    # map the unit triangle onto tri, Jacobian |det|
    J = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    f = lambda t, s: math.exp(c @ (tri[0] + J @ [s, t]))
    ref, _ = dblquad(f, 0, 1, 0, lambda s: 1 - s, epsabs=1e-13, epsrel=1e-12)
    ref *= abs(np.linalg.det(J))
    assert simplex_exp_integral(tri, c) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("scale", [0.0, 1e-12, 1e-9, 1e-7, 1e-5, 1e-2])
def test_confluent_nodes_match_quadrature(scale):
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    c = np.array([1.0, 1.0 + scale])
    J = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    ref, _ = dblquad(lambda t, s: math.exp(c @ (J @ [s, t])), 0, 1, 0, lambda s: 1 - s,
                     epsabs=1e-14, epsrel=1e-13)
    assert simplex_exp_integral(tri, c) == pytest.approx(ref, rel=1e-12)


def test_divided_difference_of_exp():
    assert exp_divided_difference([0.3]) == pytest.approx(math.exp(0.3))
    assert exp_divided_difference([0.0, 1.0]) == pytest.approx(math.e - 1)
    assert exp_divided_difference([2.0, 2.0, 2.0]) == pytest.approx(math.exp(2.0) / 2)


def test_degenerate_simplex():
    with pytest.raises(DegenerateSimplex):
        simplex_exp_integral([[0, 0], [1, 1], [2, 2]], [0.1, 0.2])


def test_interval_moments():
    m = exp_moments(interval(), [0.0])
    assert m.value == pytest.approx(2)
    assert m.first[0] == pytest.approx(0, abs=1e-15)
    assert m.second[0, 0] == pytest.approx(2 / 3)
    unit = Polytope([[1], [-1]], [0, 1])
    m = exp_moments(unit, [1.0], order=1)
    assert m.value == pytest.approx(math.e - 1, rel=1e-13)
    assert m.first[0] == pytest.approx(1.0, rel=1e-13)


def test_triangle_at_zero_matches_exact_volume():
    m = exp_moments(TRI, [0.0, 0.0])
    assert m.value == pytest.approx(4.5, rel=1e-14)
    np.testing.assert_allclose(m.first, [0, 0], atol=1e-13)


@pytest.mark.parametrize("c", [0.1, 0.615, 2.0, -3.5, 8.0])
def test_weighted_barycenter_langevin(c):
    assert weighted_barycenter(interval(), [c])[0] == pytest.approx(1 / math.tanh(c) - 1 / c, abs=1e-13)


def test_weighted_barycenter_tends_to_vertex():
    vals = [weighted_barycenter(interval(), [c])[0] for c in (1, 5, 20, 80, 300)]
    assert all(a < b < 1 for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 0.99


@pytest.mark.parametrize("method", ["quadrature", "divided"])
def test_methods_agree(method):
    P = example_eps_polytope(Fraction(1, 2))
    c = np.array([0.8, -0.3])
    ref = exp_moments(P, c, method="quadrature")
    m = exp_moments(P, c, method=method)
    assert m.value == pytest.approx(ref.value, rel=1e-12)
    np.testing.assert_allclose(m.first, ref.first, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(m.second, ref.second, rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(delzant_polygons(max_cuts=2))
def test_value_at_zero_is_volume(P):
    assert exp_moments(P, [0.0, 0.0], order=0).value == pytest.approx(float(P.volume), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(delzant_polygons(max_cuts=2), st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2))
def test_gradient_and_hessian_by_finite_differences(P, c):
    c = np.array(c)
    m = exp_moments(P, c)
    h = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        plus, minus = exp_moments(P, c + e), exp_moments(P, c - e)
        fd = (plus.value - minus.value) / (2 * h)
        assert fd == pytest.approx(m.first[k], rel=1e-6, abs=1e-9 * m.value)
        fd2 = (plus.first - minus.first) / (2 * h)
        np.testing.assert_allclose(fd2, m.second[k], rtol=1e-6, atol=1e-9 * m.value)


@settings(max_examples=30, deadline=None)
@given(delzant_polygons(max_cuts=2), st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2),
       st.lists(st.fractions(-2, 2, max_denominator=4), min_size=2, max_size=2))
def test_translation_covariance(P, c, a):
    c, af = np.array(c), np.array([float(t) for t in a])
    m, mt = exp_moments(P, c), exp_moments(P.translated(a), c)
    w = math.exp(c @ af)
    assert mt.value == pytest.approx(w * m.value, rel=1e-11)
    np.testing.assert_allclose(mt.first, w * (m.first + af * m.value), rtol=1e-10, atol=1e-12)
    second = m.second + np.outer(af, m.first) + np.outer(m.first, af) + np.outer(af, af) * m.value
    np.testing.assert_allclose(mt.second, w * second, rtol=1e-10, atol=1e-11 * w * m.value)


@settings(max_examples=30, deadline=None)
@given(delzant_polygons(max_cuts=2), st.lists(st.floats(-4, 4), min_size=2, max_size=2))
def test_moment_result_invariants(P, c):
    m = exp_moments(P, c)
    assert m.value > 0
    assert np.all(np.linalg.eigvalsh(m.covariance()) > 0)
    assert np.all(P.values(weighted_barycenter(P, c)) > 0)
