"""Exponential moments of a polytope, ``F(c) = int_P exp(c . x) dx``.

The value uses the exact simplex kernel

    int_D exp(c . x) dx = n! vol(D) exp[c.v_0, ..., c.v_n],

where ``exp[...]`` is the divided difference of ``exp``. Divided differences
are evaluated through the upper triangular Opitz matrix of ``exp`` on the
nodes: nodes are centred and scaled down so a Taylor series converges fast,
and the matrix is then squared back up. Every entry of the matrix is
positive, so squaring does not cancel and confluent or nearly equal nodes need
no special casing.

First and second moments default to tensor Gauss-Legendre quadrature over
each simplex (collapsed coordinates). The divided-difference route with
repeated nodes is available as ``method="divided"`` and serves as a cross
check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import _exact as ex
from .errors import DegenerateSimplex

TAYLOR_RADIUS = 0.5
TAYLOR_TERMS = 30  # norm of the scaled matrix is at most 1.5; 1.5**30/30! < 1e-26
QUADRATURE_SPREAD = 64.0  # |c| diam(P) above which "auto" uses divided differences


@dataclass(frozen=True)
class MomentResult:
    value: float
    first: np.ndarray | None = None
    second: np.ndarray | None = None

    def covariance(self):
        m = self.first / self.value
        return self.second / self.value - np.outer(m, m)


def _opitz(nodes):
    """Upper triangular matrix of divided differences of exp on ``nodes``.

    This is ``exp(Z)`` for ``Z = diag(nodes) + superdiagonal ones``. The
    matrix is scaled by ``2**-s`` until its diagonal is within
    ``TAYLOR_RADIUS``, exponentiated by a Horner-evaluated Taylor series,
    and squared back ``s`` times. Coinciding nodes need no special case.
    """
    z = np.asarray(nodes, dtype=float)
    k = len(z)
    spread = float(np.max(np.abs(z))) if k else 0.0
    s = max(0, math.ceil(math.log2(spread / TAYLOR_RADIUS))) if spread > TAYLOR_RADIUS else 0
    scale = 2.0 ** (-s)
    A = np.diag(z * scale) + np.diag(np.full(k - 1, scale), 1)
    eye = np.eye(k)
    T = eye.copy()
    for q in range(TAYLOR_TERMS, 0, -1):
        T = eye + (A @ T) / q
    for _ in range(s):
        T = T @ T
    return T


def exp_divided_difference(nodes):
    """Divided difference ``exp[z_0, ..., z_k]``; nodes may coincide."""
    z = np.asarray(nodes, dtype=float)
    # with all nodes <= 0 every entry of the Opitz matrix lies in (0, 1], so
    # squaring neither overflows nor cancels
    shift = z.max()
    return math.exp(shift) * _opitz(z - shift)[0, -1]


def _simplex_volume(vertices):
    n = len(vertices[0])
    if len(vertices) != n + 1:
        raise DegenerateSimplex(f"need {n + 1} vertices in dimension {n}")
    if all(isinstance(a, (int, Fraction)) for p in vertices for a in p):
        d = ex.det([[a - b for a, b in zip(p, vertices[0])] for p in vertices[1:]])
        if d == 0:
            raise DegenerateSimplex("simplex has zero volume")
        return float(abs(d)) / math.factorial(n)
    v = np.asarray(vertices, dtype=float)
    d = abs(np.linalg.det(v[1:] - v[0]))
    scale = float(np.max(np.abs(v[1:] - v[0]))) ** n
    if d <= 1e-14 * scale:
        raise DegenerateSimplex("simplex has zero volume")
    return d / math.factorial(n)


def simplex_exp_integral(vertices, c):
    """``int_D exp(c . x) dx`` over the simplex with the given vertices."""
    vol = _simplex_volume(vertices)
    v = np.asarray([[float(a) for a in p] for p in vertices])
    n = v.shape[1]
    return math.factorial(n) * vol * exp_divided_difference(v @ np.asarray(c, dtype=float))


@lru_cache(maxsize=32)
def _reference_rule(n, q):
    """Barycentric nodes and weights for the unit simplex (volume 1/n!).

    Collapsed coordinates: lam_1 = u_1, lam_2 = u_2 (1 - u_1), ... with
    Jacobian prod_i (1 - u_i)^(n - 1 - i), Gauss-Legendre in every u_i.
    """
    g, w = np.polynomial.legendre.leggauss(q)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    u = np.stack([a.ravel() for a in np.meshgrid(*([g] * n), indexing="ij")], axis=1)
    weight = np.prod(np.stack([a.ravel() for a in np.meshgrid(*([w] * n), indexing="ij")], axis=1), axis=1)
    lam = np.zeros((u.shape[0], n + 1))
    rest = np.ones(u.shape[0])
    for i in range(n):
        lam[:, i + 1] = u[:, i] * rest
        weight = weight * (1.0 - u[:, i]) ** (n - 1 - i)
        rest = rest * (1.0 - u[:, i])
    lam[:, 0] = rest
    return lam, weight


class _SimplexSet:
    """Float data of a polytope triangulation, cached on the polytope."""

    def __init__(self, P):
        self.n = P.n
        self.vertices = np.array([[[float(a) for a in p] for p in pts] for pts, _ in P.simplices])
        self.volumes = np.array([float(v) for _, v in P.simplices])
        self.diameter = P.diameter


def _simplex_set(P):
    cache = P.__dict__.get("_simplex_set")
    if cache is None:
        cache = _SimplexSet(P)
        P.__dict__["_simplex_set"] = cache
    return cache


def _value(S, c, shift):
    """Sum of simplex kernels for ``exp(c . (x - shift))``."""
    total = 0.0
    fact = math.factorial(S.n)
    for verts, vol in zip(S.vertices, S.volumes):
        total += fact * vol * exp_divided_difference((verts - shift) @ c)
    return total


def _quadrature(S, c, shift, order):
    n = S.n
    spread = float(np.linalg.norm(c)) * S.diameter
    q = max(20, int(math.ceil(spread)) + 12)
    q = -(-q // 8) * 8  # a few sizes only, so the rule cache is hit
    lam, w = _reference_rule(n, q)
    first = np.zeros(n)
    second = np.zeros((n, n))
    value = 0.0
    fact = math.factorial(n)
    for verts, vol in zip(S.vertices, S.volumes):
        x = lam @ verts
        f = w * np.exp((x - shift) @ c) * (fact * vol)
        value += f.sum()
        first += f @ x
        if order >= 2:
            second += (x * f[:, None]).T @ x
    return value, first, second


def _divided(S, c, shift, order):
    n = S.n
    fact = math.factorial(n)
    value = 0.0
    first = np.zeros(n)
    second = np.zeros((n, n))
    for verts, vol in zip(S.vertices, S.volumes):
        z = (verts - shift) @ c
        k = n + 1
        # differentiating in c repeats nodes: a node of multiplicity m
        # contributes m times the difference with multiplicity m + 1
        scale = fact * vol
        value += scale * exp_divided_difference(z)
        for i in range(k):
            first += scale * verts[i] * exp_divided_difference(np.append(z, z[i]))
        if order >= 2:
            for i in range(k):
                for j in range(k):
                    dd = exp_divided_difference(np.concatenate([z, [z[i], z[j]]]))
                    second += (1 + (i == j)) * scale * np.outer(verts[i], verts[j]) * dd
    return value, first, second


def exp_moments(P, c, order=2, *, shift=None, method="auto"):
    """Exponential moments of ``P``.

    Parameters
    ----------
    P : Polytope
    c : vector of length n
    order : 0, 1 or 2
    shift : optional point ``a``; integrate ``exp(c . (x - a))`` instead, which
        avoids overflow for large ``c``. Moments stay moments of ``x``.
    method : "quadrature", "divided" or "auto" for orders 1 and 2. The
        quadrature degree grows with ``|c| diam(P)``, so "auto" switches to
        divided differences once that spread exceeds ``QUADRATURE_SPREAD``.
    """
    c = np.asarray(c, dtype=float).reshape(P.n)
    a = np.zeros(P.n) if shift is None else np.asarray(shift, dtype=float)
    S = _simplex_set(P)
    value = _value(S, c, a)
    if order == 0:
        return MomentResult(value)
    if method == "auto":
        spread = float(np.linalg.norm(c)) * S.diameter
        method = "quadrature" if spread <= QUADRATURE_SPREAD else "divided"
    if method == "quadrature":
        _, first, second = _quadrature(S, c, a, order)
    elif method == "divided":
        _, first, second = _divided(S, c, a, order)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MomentResult(value, first, second if order >= 2 else None)


def weighted_barycenter(P, c):
    """``int_P x exp(c.x) dx / int_P exp(c.x) dx``."""
    c = np.asarray(c, dtype=float)
    V = P.vertex_array()
    m = exp_moments(P, c, order=1, shift=V[np.argmax(V @ c)])
    return m.first / m.value
