"""Blow-up families of polytopes and metrics along them.

A family starts from the polytope ``P_Y`` of the blown-down variety, adds one
facet with normal ``v_N = sum_{j in J} v_j`` and moves all offsets by ``t``
times the offsets of an ample class ``A``:

    l_j^t = v_j . x + lambda_j + t lambda^A_j            (j < N)
    l_N^t = v_N . x + sum_{j in J} lambda_j + t lambda^A_N

At ``t = 0`` the new facet degenerates to the face where the ``l_j``,
``j in J``, vanish, and ``l_N^0 = sum_{j in J} l_j^0``.

Potentials for different ``t`` live in the same chart of log coordinates, so
they can be compared directly once the translation freedom of the equation
at ``s = alpha`` is removed; :func:`solve_path` moves every solution so that
its measure ``exp(-alpha (phi - tau . rho)) drho`` has its center of mass at
the origin.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.ndimage import distance_transform_edt, map_coordinates
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from . import _exact as ex
from .errors import AlphaTooLarge, ToricError, ValidationError
from .invariants import greatest_ricci_lower_bound
from .ma_solver import SolveConfig, setup_problem, solve_continuity
from .polytope import Polytope, is_delzant
from .transform import SmoothPart, SymplecticPotential, guillemin_potential, legendre_to_rho

GH_SAMPLES = 64
# degree of the fitted smooth part used for warm starts; 1 carries the
# translation and constant of the previous solution. Higher degrees
# extrapolate into regions the new polytope adds and make the start lose
# discrete convexity where the reference Hessian is tiny.
WARM_DEGREE = 1


@dataclass(frozen=True)
class BlowupFamily:
    """Y-side polytope, offsets of the class A and the center facet set J.

    ``lambda_a`` has one entry per facet of ``P^t``: the facets of ``base``
    in order, then the new facet. ``center`` holds 0-based indices into the
    facets of ``base``.
    """

    base: Polytope
    lambda_a: tuple
    center: tuple
    t_grid: tuple = (1, Fraction(1, 2), Fraction(1, 4), Fraction(1, 10), Fraction(1, 20))
    normal: tuple | None = None

    def __post_init__(self):
        Y = self.base
        lam_a = tuple(ex.as_fraction(a) for a in self.lambda_a)
        if len(lam_a) != Y.N + 1:
            raise ValidationError(f"lambda_a needs {Y.N + 1} entries, got {len(lam_a)}")
        J = tuple(sorted(int(j) for j in self.center))
        if not J or len(set(J)) != len(J) or J[0] < 0 or J[-1] >= Y.N:
            raise ValidationError(f"center facet set {list(self.center)} is not a set of facet indices")
        if len(J) > Y.n:
            raise ValidationError("center facet set is larger than the dimension")
        vN = tuple(sum((Y.normals[j][k] for j in J), Fraction(0)) for k in range(Y.n))
        if self.normal is not None and tuple(ex.as_fraction(a) for a in self.normal) != vN:
            raise ValidationError(f"contracted normal {list(self.normal)} is not the sum of the center normals")
        ts = tuple(sorted((ex.as_fraction(t) for t in self.t_grid), reverse=True))
        if not ts or ts[-1] <= 0 or ts[0] > 1:
            raise ValidationError("t grid must lie in (0, 1]")
        object.__setattr__(self, "lambda_a", lam_a)
        object.__setattr__(self, "center", J)
        object.__setattr__(self, "t_grid", ts)
        object.__setattr__(self, "normal", vN)
        for t in ts:
            rep = is_delzant(blowup_polytope(self, t))
            if not rep.is_delzant:
                raise ValidationError(f"P^t is not Delzant at t={t}: {rep.failures}")

    @property
    def n(self):
        return self.base.n

    @property
    def N(self):
        return self.base.N + 1

    @property
    def limit_offset(self):
        return sum((self.base.offsets[j] for j in self.center), Fraction(0))

    def limit_facet_values(self, x):
        """``l_j^0(x)`` for all N facets at a rational point."""
        vals = list(self.base.evaluate_exact(x))
        vals.append(ex.dot(self.normal, x) + self.limit_offset)
        return vals

    def transformed(self, A, b=None):
        """Same family after ``x -> A x + b`` with ``A`` unimodular."""
        return BlowupFamily(self.base.transformed(A, b), self.lambda_a, self.center, self.t_grid)

    def to_dict(self):
        return {"base": self.base.to_dict(), "lambda_a": [str(a) for a in self.lambda_a],
                "center": list(self.center), "normal": [str(a) for a in self.normal],
                "t_grid": [str(t) for t in self.t_grid]}


def blowup_polytope(family, t):
    t = ex.as_fraction(t)
    if not 0 < t <= 1:
        raise ValidationError(f"t must lie in (0, 1], got {t}")
    Y, lam_a = family.base, family.lambda_a
    offsets = [lam + t * a for lam, a in zip(Y.offsets, lam_a)]
    offsets.append(family.limit_offset + t * lam_a[-1])
    normals = [list(v) for v in Y.normals] + [list(family.normal)]
    return Polytope(normals, offsets, name=f"blowup t={t}", raw=Y.raw)


def limit_angles(family, alpha):
    """Exact ``beta_j^0 = alpha l_j^0(P_C)`` at the barycenter of ``P_Y``."""
    alpha = ex.as_fraction(alpha)
    return [alpha * v for v in family.limit_facet_values(family.base.barycenter)]


def contraction_angle_check(family, alpha):
    """``(1 - beta_N^0) - sum_{j in J} (1 - beta_j^0) + (|J| - 1)``, exactly.

    Vanishes because ``l_N^0`` is the sum of the ``l_j^0`` over J.
    """
    beta = limit_angles(family, alpha)
    J = family.center
    return (1 - beta[-1]) - sum(1 - beta[j] for j in J) + (len(J) - 1)


def volume_polynomial(family):
    """Exact coefficients ``c_0..c_n`` of ``Vol(P^t) = sum c_k t^k``.

    Interpolates at ``t = 1, 1/2, ..., 1/(n+1)``; this is the volume
    polynomial as long as the combinatorial type does not change on (0, 1],
    which :func:`solve_path` confirms on its grid.
    """
    n = family.n
    ts = [Fraction(1, k + 1) for k in range(n + 1)]
    rows = [[t ** k for k in range(n + 1)] for t in ts]
    vols = [blowup_polytope(family, t).volume for t in ts]
    return ex.solve(rows, vols)


def evaluate_polynomial(coeffs, t):
    t = ex.as_fraction(t)
    return sum(c * t ** k for k, c in enumerate(coeffs))


def plane_blowup_example(t_grid=None):
    """The plane blown up at a point, degenerating to P^2 as t -> 0.

    ``P^t = {x+1 >= 0, y+1 >= 0, 1+2t-x-y >= 0, 2-t+x+y >= 0}``.
    """
    Y = Polytope([[1, 0], [0, 1], [-1, -1]], [1, 1, 1], name="P2")
    kw = {} if t_grid is None else {"t_grid": tuple(t_grid)}
    return BlowupFamily(Y, (0, 0, 2, -1), (0, 1), **kw)


# -- solving along the path --------------------------------------------------

def _interpolate(values, grid, points):
    """Cubic spline values of a box array at arbitrary points (clamped)."""
    coords = (np.asarray(points, dtype=float) - np.asarray(grid.lower)) / grid.h
    return map_coordinates(np.asarray(values, dtype=float), coords.T, order=3, mode="nearest")


def translation_shift(problem, phi):
    """Center of mass of ``exp(-alpha (phi - tau . rho))`` over the domain."""
    mask = problem.domain
    rho = problem.grid.points()[mask]
    w = problem.alpha * (phi.values[mask] - rho @ problem.tau)
    e = np.exp(-(w - w.min()))
    return (rho.T @ e) / e.sum()


def normalized_values(problem, phi, shift, points):
    """``phi(rho + a) - tau . a`` at the given points."""
    pts = np.asarray(points, dtype=float) + shift
    return _interpolate(phi.values, problem.grid, pts) - float(problem.tau @ shift)


def _safe_radius(problem, shift):
    """Euclidean distance from the shift to the edge of the interior nodes."""
    dist = distance_transform_edt(problem.interior) * problem.grid.h
    return float(_interpolate(dist, problem.grid, shift[None, :])[0])


class _Polynomial:
    """Least squares polynomial in scaled coordinates with derivatives."""

    def __init__(self, x, y, degree, lo, hi):
        n = x.shape[1]
        self.mid, self.half = 0.5 * (hi + lo), 0.5 * (hi - lo)
        self.exps = [e for e in np.ndindex(*(degree + 1,) * n) if sum(e) <= degree]
        self.coef = np.linalg.lstsq(self._basis(x, ()), y, rcond=None)[0]

    def _basis(self, x, der):
        z = (np.atleast_2d(x) - self.mid) / self.half
        cols = []
        for e in self.exps:
            col = np.ones(len(z))
            for k, p in enumerate(e):
                d = der.count(k)
                if d > p:
                    col = np.zeros(len(z))
                    break
                col = col * (math.perm(p, d) * z[:, k] ** (p - d) / self.half[k] ** d)
            cols.append(col)
        return np.stack(cols, axis=1)

    def value(self, x):
        return self._basis(x, ()) @ self.coef

    def gradient(self, x):
        return np.stack([self._basis(x, (k,)) @ self.coef for k in range(len(self.mid))], axis=-1)

    def hessian(self, x):
        n = len(self.mid)
        out = np.empty((np.atleast_2d(x).shape[0], n, n))
        for a in range(n):
            for b in range(a, n):
                out[:, a, b] = out[:, b, a] = self._basis(x, (a, b)) @ self.coef
        return out


def transported_start(problem, previous, phi, degree=WARM_DEGREE):
    """Initial deviation for ``problem`` from a solution of a nearby problem.

    The previous solution is written as ``u = u_hat + f`` on its polytope,
    ``f`` is fitted by a polynomial and ``u_hat + f`` on the new polytope,
    with the new cone angles, is transformed back to the new grid. This keeps
    the boundary behaviour of the new reference, which interpolating
    ``phi - phi_hat`` in log coordinates does not. Returns None when the
    transformed start cannot be built.
    """
    P0 = previous.polytope
    mask = previous.interior
    rho = previous.grid.points()[mask]
    x = phi.gradient[mask]
    keep = np.min(P0.values(x), axis=1) > 1e-3 * P0.diameter
    if keep.sum() < 4 * degree ** problem.n:
        return None
    x, rho = x[keep], rho[keep]
    u = np.einsum("ka,ka->k", x, rho) - phi.values[mask][keep]
    f = u - guillemin_potential(P0, previous.beta).value(x)
    verts = problem.polytope.vertex_array()
    poly = _Polynomial(x, f, degree, verts.min(axis=0), verts.max(axis=0))
    u_new = SymplecticPotential(problem.polytope, problem.beta,
                                SmoothPart(poly.value, poly.gradient, poly.hessian))
    try:
        phi0 = legendre_to_rho(u_new, problem.grid)
    except (ToricError, np.linalg.LinAlgError):
        return None
    dev = phi0.values - problem.reference.values
    return dev if np.all(np.isfinite(dev)) else None


@dataclass
class PathStep:
    t: Fraction
    alpha: float
    polytope: Polytope
    volume: Fraction
    tau: np.ndarray
    beta: np.ndarray
    report: object
    shift: np.ndarray
    warm: bool
    gap: float | None = None
    gh: float | None = None

    def to_dict(self):
        return {"t": str(self.t), "alpha": self.alpha, "volume": str(self.volume),
                "tau": self.tau.tolist(), "beta": self.beta.tolist(), "warm_start": self.report.warm_start,
                "iterations": self.report.iterations, "wasted_iterations": self.report.wasted_iterations,
                "residual_sup": self.report.residual_sup,
                "gauge_multiplier": self.report.gauge_multiplier, "shift": self.shift.tolist(),
                "gap": self.gap, "gh_proxy": self.gh, "wall_time": self.report.wall_time}


@dataclass
class PathReport:
    family: BlowupFamily
    steps: list
    limit: PathStep                 # Y-side solve, t = 0
    volume_coefficients: list
    compare_axes: list              # shared compact subgrid, per axis
    limit_angles: list              # exact beta^0
    extrapolated_angles: np.ndarray  # linear extrapolation of beta^t to t = 0
    step_constant: float            # max |beta^t - beta^t'| / |t - t'| over neighbours
    limit_constant: float           # max |beta^t - beta^0| / t
    cold_iterations: dict           # cold solves: first t, last t, Y side
    wall_time: float = 0.0
    gh_samples: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def gaps(self):
        return [s.gap for s in self.steps]

    @property
    def path_iterations(self):
        return sum(s.report.iterations for s in self.steps)

    @property
    def iteration_budget(self):
        """Twice the cold iterations of the two ends of the t grid, or None if unmeasured."""
        c = self.cold_iterations
        if c.get("first") is None or c.get("last") is None:
            return None
        return 2 * (c["first"] + c["last"])

    def compare_points(self):
        mesh = np.meshgrid(*self.compare_axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)

    def to_dict(self):
        return {"family": self.family.to_dict(),
                "steps": [s.to_dict() for s in self.steps],
                "limit": self.limit.to_dict(),
                "volume_polynomial": [str(c) for c in self.volume_coefficients],
                "limit_angles": [str(b) for b in self.limit_angles],
                "extrapolated_angles": self.extrapolated_angles.tolist(),
                "step_constant": self.step_constant, "limit_constant": self.limit_constant,
                "compare_box": [[float(a[0]), float(a[-1]), len(a)] for a in self.compare_axes],
                "path_iterations": self.path_iterations, "cold_iterations": self.cold_iterations,
                "iteration_budget": self.iteration_budget,
                "gh_samples": self.gh_samples, "wall_time": self.wall_time}


def default_alpha(family):
    """0.9 times the smaller Ricci bound of the two ends of the path."""
    ends = [blowup_polytope(family, family.t_grid[0]), family.base]
    return 0.9 * min(float(greatest_ricci_lower_bound(P)) for P in ends)


def solve_path(family, alpha=None, m=None, config=None, *, compare_points=33,
               compare_fraction=0.5, gh=True, gh_samples=GH_SAMPLES, measure_cold=True, log=None):
    """Solve the Kahler-Einstein equation along the t grid and on P_Y.

    ``alpha`` is a number, a callable ``t -> alpha_t`` or None for
    :func:`default_alpha`. The first t is solved cold, later ones start
    from :func:`transported_start` applied to the previous solution. The
    comparison subgrid is a cube around the origin whose half
    width is ``compare_fraction`` times the smallest distance from a
    solution's center of mass to the edge of its interior nodes. With
    ``measure_cold`` the last t is also solved cold, so the warm path cost
    can be compared with cold solves of both ends of the t grid.
    """
    t0 = time.perf_counter()
    config = config or SolveConfig()
    if alpha is None:
        alpha = default_alpha(family)
    rule = alpha if callable(alpha) else (lambda t, a=float(alpha): a)
    R_Y = float(greatest_ricci_lower_bound(family.base))

    plan = []
    for t in family.t_grid:
        P = blowup_polytope(family, t)
        a = float(rule(t))
        bound = min(float(greatest_ricci_lower_bound(P)), R_Y)
        if not 0 < a < bound:
            raise AlphaTooLarge(t, a, bound)
        plan.append((t, P, a))
    a_Y = float(rule(Fraction(0)))
    if not 0 < a_Y < R_Y:
        raise AlphaTooLarge(0, a_Y, R_Y)

    def solve(t, P, a, previous):
        problem = setup_problem(P, a, None, grid=(None, m))
        cfg = config
        if previous is not None:
            psi0 = transported_start(problem, *previous)
            if psi0 is not None:
                cfg = SolveConfig(**{**config.__dict__, "initial_psi": psi0})
        try:
            rep = solve_continuity(problem, cfg)
        except ToricError as err:
            err.t = str(t)
            raise
        if log:
            log(f"t={t} iterations={rep.iterations} residual={rep.residual_sup:.3e} time={rep.wall_time:.1f}s")
        step = PathStep(t, a, P, P.volume, problem.tau.copy(), problem.beta.copy(), rep,
                        translation_shift(problem, rep.phi), previous is not None)
        return problem, step

    steps, problems = [], []
    previous = None
    for t, P, a in plan:
        problem, step = solve(t, P, a, previous)
        steps.append(step)
        problems.append(problem)
        previous = (problem, step.report.phi)
    prob_Y, limit = solve(Fraction(0), family.base, a_Y, None)
    cold = {"first": steps[0].report.iterations, "last": None, "limit": limit.report.iterations}
    if not steps[-1].warm:
        cold["last"] = steps[-1].report.iterations
    elif measure_cold:
        t, P, a = plan[-1]
        cold["last"] = solve(t, P, a, None)[1].report.iterations

    # cone data continuity
    beta0 = limit_angles(family, Fraction(repr(a_Y)))
    b0 = np.array([float(b) for b in beta0])
    ts = np.array([float(s.t) for s in steps])
    betas = np.array([s.beta for s in steps])
    jumps = [np.max(np.abs(betas[i + 1] - betas[i])) / abs(ts[i + 1] - ts[i]) for i in range(len(ts) - 1)]
    step_constant = float(max(jumps)) if jumps else 0.0
    limit_constant = float(np.max(np.max(np.abs(betas - b0), axis=1) / ts))
    if len(ts) >= 2:
        t1, t2 = ts[-1], ts[-2]
        extrap = betas[-1] - t1 * (betas[-2] - betas[-1]) / (t2 - t1)
    else:
        extrap = betas[-1].copy()

    # shared comparison subgrid
    radius = min(_safe_radius(p, s.shift) for p, s in zip(problems + [prob_Y], steps + [limit]))
    half = compare_fraction * radius / math.sqrt(family.n)
    axes = [np.linspace(-half, half, compare_points)] * family.n
    report = PathReport(family, steps, limit, volume_polynomial(family), axes, beta0, extrap,
                        step_constant, limit_constant, cold)
    report.meta["problems"] = problems
    report.meta["limit_problem"] = prob_Y
    pts = report.compare_points()
    ref = normalized_values(prob_Y, limit.report.phi, limit.shift, pts)
    for p, s in zip(problems, steps):
        s.gap = float(np.max(np.abs(normalized_values(p, s.report.phi, s.shift, pts) - ref)))
    limit.gap = 0.0
    if gh:
        gh_proxy(report, gh_samples)
    report.wall_time = time.perf_counter() - t0
    return report


# -- Gromov-Hausdorff proxy ------------------------------------------------------

def _sample_nodes(shape, count):
    """Evenly spread node indices: about ``count ** (1/n)`` per axis."""
    n = len(shape)
    k = max(2, int(round(count ** (1.0 / n))))
    per_axis = [np.unique(np.linspace(0, s - 1, k).round().astype(int)) for s in shape]
    mesh = np.meshgrid(*per_axis, indexing="ij")
    return np.ravel_multi_index(tuple(a.ravel() for a in mesh), shape)


def hessian_graph_distances(axes, hessians, samples):
    """Shortest paths between sample nodes in the metric ``drho^T H drho``.

    The graph joins every node to its ``3^n - 1`` neighbours; an edge gets
    the length of its displacement in the mean Hessian of its two ends.
    ``hessians`` has shape ``(len(axes[0]), ..., n, n)``.
    """
    shape = tuple(len(a) for a in axes)
    n = len(shape)
    h = np.array([a[1] - a[0] for a in axes])
    H = np.asarray(hessians, dtype=float).reshape(-1, n, n)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    rows, cols, vals = [], [], []
    for d in np.ndindex(*(3,) * n):
        d = np.array(d) - 1
        if not d.any() or tuple(d) < tuple(-d):
            continue  # each undirected edge once
        src = tuple(slice(max(0, -k), s - max(0, k)) for k, s in zip(d, shape))
        dst = tuple(slice(max(0, k), s - max(0, -k)) for k, s in zip(d, shape))
        a, b = idx[src].ravel(), idx[dst].ravel()
        step = d * h
        Hm = 0.5 * (H[a] + H[b])
        length = np.sqrt(np.maximum(np.einsum("i,kij,j->k", step, Hm, step), 0.0))
        rows.append(a)
        cols.append(b)
        vals.append(length)
    size = idx.size
    graph = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(size, size)).tocsr()
    dist = dijkstra(graph, directed=False, indices=samples)
    return dist[:, samples]


def distance_gap(D1, D2):
    return float(np.max(np.abs(np.asarray(D1) - np.asarray(D2))))


def _normalized_hessians(problem, phi, shift, points):
    n = problem.n
    H = phi.hessian.reshape(problem.grid.shape + (n, n))
    pts = np.asarray(points, dtype=float) + shift
    out = np.empty((len(pts), n, n))
    for i in range(n):
        for j in range(i, n):
            out[:, i, j] = out[:, j, i] = _interpolate(H[..., i, j], problem.grid, pts)
    return out


def gh_proxy(report, samples=GH_SAMPLES):
    """Per-t sup gap between sampled Hessian-metric graph distances.

    Distances are taken on the shared comparison subgrid, so they only see
    the real slice away from the truncation boundary; torus directions and
    the neighbourhood of the contracted divisor are not represented. The
    result is a proxy for continuity, not a Gromov-Hausdorff distance.
    """
    axes = report.compare_axes
    pts = report.compare_points()
    shape = tuple(len(a) for a in axes)
    nodes = _sample_nodes(shape, samples)
    lim = report.limit
    H_Y = _normalized_hessians(report.meta["limit_problem"], lim.report.phi, lim.shift, pts)
    D_Y = hessian_graph_distances(axes, H_Y, nodes)
    out = []
    for p, s in zip(report.meta["problems"], report.steps):
        H = _normalized_hessians(p, s.report.phi, s.shift, pts)
        s.gh = distance_gap(hessian_graph_distances(axes, H, nodes), D_Y)
        out.append(s.gh)
    lim.gh = 0.0
    report.gh_samples = int(len(nodes))
    return out


__all__ = ["BlowupFamily", "PathReport", "PathStep", "blowup_polytope", "default_alpha",
           "distance_gap", "evaluate_polynomial", "gh_proxy", "hessian_graph_distances",
           "contraction_angle_check", "limit_angles", "normalized_values", "plane_blowup_example",
           "solve_path", "translation_shift", "transported_start", "volume_polynomial"]
