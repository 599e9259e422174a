"""Polytope invariants governing conical Kahler-Einstein metrics and solitons.

* ``greatest_ricci_lower_bound``: ``R = min_j 1 / l_j(P_C)`` at the barycenter.
* ``s_invariant``: ``S = 1 / min_{tau in P} max_j l_j(tau)``, the largest
  Einstein constant for which a conical soliton exists, with the optimal
  centre and whether it can be taken in the open polytope.
* ``cone_angles``: ``beta_j = alpha l_j(tau)``.
* ``solve_soliton_field``: the unique ``c`` whose exponentially weighted
  barycenter is ``tau``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np

from . import _exact as ex
from .errors import LPFailure, NonConvergence, TauOutsidePolytope
from .moments import exp_moments, weighted_barycenter

# above this many candidate bases the exact vertex enumeration gives way to HiGHS
EXACT_LP_LIMIT = 200_000
MAX_EXPONENT_STEP = 20.0


class ConeAngleWarning(UserWarning):
    """Some cone angle is at least 1 (smooth or a limit datum)."""


@dataclass(frozen=True)
class ConeData:
    alpha: float
    tau: np.ndarray
    c: np.ndarray
    beta: np.ndarray

    @property
    def divisor_coeffs(self):
        return 1.0 - self.beta


@dataclass(frozen=True)
class SInvariantResult:
    s_value: Fraction | float
    t_star: Fraction | float
    optimal_tau: tuple
    optimal_face: tuple  # vertices of the optimal set, as tau points
    solvable_at_S: bool
    exact: bool = True

    def to_dict(self):
        return {"S": float(self.s_value), "S_exact": str(self.s_value) if self.exact else None,
                "t_star": float(self.t_star),
                "optimal_tau": [float(a) for a in self.optimal_tau],
                "optimal_face": [[float(a) for a in p] for p in self.optimal_face],
                "solvable_at_S": self.solvable_at_S}


def greatest_ricci_lower_bound(P):
    """``min_j 1 / l_j(P_C)``, exact when the offsets are rational."""
    vals = P.evaluate_exact(P.barycenter)
    return min(1 / v for v in vals)


def s_invariant(P, method="auto"):
    """Solve ``min t`` subject to ``0 <= l_j(tau) <= t`` for all j.

    The exact path enumerates the vertices of the feasible region in
    ``(tau, t)`` space; the optimal set is the convex hull of the optimal
    vertices and its vertex average is reported as ``optimal_tau``. Since all
    constraints are affine, that average lies in the open polytope whenever
    any optimal point does, so ``solvable_at_S`` is decided exactly.
    """
    n, N = P.n, P.N
    if method == "auto":
        method = "exact" if math.comb(2 * N, n + 1) <= EXACT_LP_LIMIT else "float"
    if method == "float":
        return _s_invariant_float(P)

    rows, rhs = [], []
    for v, lam in zip(P.normals, P.offsets):
        rows.append(list(v) + [Fraction(0)])   # l_j(tau) >= 0
        rhs.append(-lam)
        rows.append([-a for a in v] + [Fraction(1)])  # t - l_j(tau) >= 0
        rhs.append(lam)
    best = None
    optimal = []
    for sub in combinations(range(len(rows)), n + 1):
        sol = ex.solve([rows[i] for i in sub], [rhs[i] for i in sub])
        if sol is None:
            continue
        if any(ex.dot(r, sol) < b for r, b in zip(rows, rhs)):
            continue
        t = sol[-1]
        point = tuple(sol[:-1])
        if best is None or t < best:
            best, optimal = t, [point]
        elif t == best and point not in optimal:
            optimal.append(point)
    if best is None:
        raise LPFailure("infeasible", "no vertex found")
    optimal.sort()
    tau = tuple(sum(c) / len(optimal) for c in zip(*optimal))
    interior = all(v > 0 for v in P.evaluate_exact(tau))
    return SInvariantResult(1 / best, best, tau, tuple(optimal), interior, True)


def _s_invariant_float(P):
    from scipy.optimize import linprog

    V, lam = P.normal_array, P.offset_array
    n, N = P.n, P.N
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    # -l_j <= 0 and l_j - t <= 0
    A = np.vstack([np.hstack([-V, np.zeros((N, 1))]), np.hstack([V, -np.ones((N, 1))])])
    b = np.concatenate([lam, -lam])
    res = linprog(cost, A_ub=A, b_ub=b, bounds=[(None, None)] * (n + 1), method="highs")
    if res.status != 0:
        raise LPFailure(res.status, res.message)
    t = float(res.x[-1])
    # centre of the optimal face: maximize the slack of the l_j >= 0 rows at t = t*
    A2 = np.vstack([np.hstack([-V, np.ones((N, 1))]), np.hstack([V, np.zeros((N, 1))])])
    b2 = np.concatenate([lam, t - lam + 1e-12 * max(1.0, abs(t))])
    res2 = linprog(-cost, A_ub=A2, b_ub=b2, bounds=[(None, None)] * n + [(0, None)], method="highs")
    tau = res2.x[:n] if res2.status == 0 else res.x[:n]
    slack = res2.x[-1] if res2.status == 0 else 0.0
    interior = slack > 1e-9 * P.diameter
    return SInvariantResult(1.0 / t, t, tuple(tau), (tuple(tau),), bool(interior), False)


def cone_angles(P, alpha, tau):
    """``beta_j = alpha l_j(tau)``; warns if some angle is at least 1."""
    vals = np.asarray(P.values(np.asarray(tau, dtype=float)), dtype=float)
    if np.any(vals <= 0):
        raise TauOutsidePolytope(f"tau={list(np.ravel(tau))} is not in the open polytope")
    beta = float(alpha) * vals
    if np.any(beta >= 1.0 - 1e-15):
        warnings.warn(f"cone angles {beta.tolist()} include values >= 1", ConeAngleWarning, stacklevel=2)
    return beta


def soliton_objective(P, c, tau):
    """``G(c) = log int_P exp(c . (x - tau)) dx`` with gradient and Hessian.

    The exponent is shifted to the vertex maximizing ``c . x`` so that no
    exponential overflows, however large ``c`` gets during a line search.
    """
    c = np.asarray(c, dtype=float)
    V = P.vertex_array()
    top = V[np.argmax(V @ c)]
    m = exp_moments(P, c, order=2, shift=top)
    mean = m.first / m.value
    G = math.log(m.value) + float(c @ (top - np.asarray(tau, dtype=float)))
    return G, mean - tau, m.second / m.value - np.outer(mean, mean)


def solve_soliton_field(P, tau, tol=1e-12, max_iter=100, c0=None):
    """Damped Newton for the minimizer of :func:`soliton_objective`.

    Armijo backtracking with parameter 1e-4 and step halving down to 2**-30.
    Steps are first shortened so that ``c . x`` changes by at most a trust
    radius across the polytope; it starts at ``MAX_EXPONENT_STEP`` and
    doubles whenever a shortened step is accepted in full.
    """
    tau = np.asarray(tau, dtype=float).reshape(P.n)
    if np.any(P.values(tau) <= 0):
        raise TauOutsidePolytope(f"tau={tau.tolist()} is not in the open polytope")
    c = np.zeros(P.n) if c0 is None else np.asarray(c0, dtype=float).copy()
    diam = P.diameter
    radius = MAX_EXPONENT_STEP
    G, g, H = soliton_objective(P, c, tau)
    for it in range(max_iter + 1):
        if np.linalg.norm(g) <= tol:
            return c
        if it == max_iter:
            break
        step = -np.linalg.solve(H, g)
        # cap the change of c . x across P so far starts do not overshoot
        # into regions where the moments are expensive to integrate
        reach = float(np.linalg.norm(step)) * diam
        capped = reach > radius
        if capped:
            step *= radius / reach
        slope = float(g @ step)
        lam = 1.0
        while True:
            trial = c + lam * step
            Gt, gt, Ht = soliton_objective(P, trial, tau)
            if not (np.isfinite(Gt) and np.all(np.isfinite(Ht))):
                Gt = math.inf
            # a squared Newton decrement this small means G can no longer
            # resolve the decrease; Newton is in its quadratic regime
            if np.isfinite(Gt) and (Gt <= G + 1e-4 * lam * slope or -slope < 1e-10 * (1.0 + abs(G))):
                break
            lam *= 0.5
            if lam < 2.0 ** -30:
                raise NonConvergence("soliton line search stalled", it, float(np.linalg.norm(g)))
        if capped and lam == 1.0:
            radius *= 2.0
        c, G, g, H = trial, Gt, gt, Ht
    raise NonConvergence("soliton field did not converge", max_iter, float(np.linalg.norm(g)))


def soliton_residual(P, c, tau):
    """``|weighted barycenter(c) - tau|``."""
    tau = np.asarray(tau, dtype=float)
    return float(np.linalg.norm(weighted_barycenter(P, c) - tau))


def cone_data(P, alpha, tau=None, tol=1e-12):
    """Assemble the cone data; ``tau`` defaults to the barycenter (c = 0)."""
    if tau is None:
        tau = np.array([float(a) for a in P.barycenter])
        c = np.zeros(P.n)
    else:
        tau = np.asarray(tau, dtype=float).reshape(P.n)
        c = solve_soliton_field(P, tau, tol=tol)
    beta = cone_angles(P, alpha, tau)
    return ConeData(float(alpha), tau, c, beta)
