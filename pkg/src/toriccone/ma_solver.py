"""Real Monge-Ampere solver for toric conical Kahler-Einstein metrics and solitons.

In logarithmic coordinates the soliton equation reads

    det D^2 phi = exp(-alpha (phi - tau . rho) - c . D phi),

and it is reached from the reference potential ``phi_hat`` through the path

    log det D^2 phi + s (phi - tau.rho) + (alpha - s)(phi_hat - tau.rho)
        + c . D phi = 0,        0 <= s <= alpha.

We solve for ``psi = phi - phi_hat`` on a truncated box with mirrored
(homogeneous Neumann) boundary data. Derivatives of ``phi_hat`` are exact
(they come from the Legendre inversion), derivatives of ``psi`` are second
order central differences, and ``psi`` is carried in extended precision so
that roundoff in the far field, where ``D^2 phi`` is tiny, stays below the
residual tolerance.

Two degeneracies are handled by bordering the Newton system:

* at ``s = 0`` the equation only determines ``psi`` up to a constant and is
  solvable only for one normalizing constant ``kappa``; we solve for
  ``(psi, kappa)`` with ``mean(psi) = 0``;
* at ``s = alpha`` every translate ``phi(rho + a) - tau . a`` is again a
  solution. The solution reached by the continuity path satisfies
  ``int (D phi_hat - tau) exp(-w) drho = 0`` with
  ``w = s (phi - tau.rho) + (alpha - s)(phi_hat - tau.rho)``, which holds for
  every ``s < alpha``; we impose it at ``s = alpha`` with a multiplier
  ``mu`` on the direction ``D phi_hat - tau``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BarycentricInterpolator
from scipy.ndimage import binary_erosion, distance_transform_edt
from scipy.sparse.linalg import splu

from .errors import (InvalidAngles, NonConvergence, NonConvexIterate,
                     OracleNonConvergence, ValidationError)
from .invariants import solve_soliton_field
from .transform import (Grid, GridPotential, guillemin_potential, invert_gradient,
                        legendre_to_rho, moment_map_image)

LD = np.longdouble
# the computational domain is {alpha h(rho) <= K} with exp(-K) = 1e-8
TRUNCATION_K = math.log(1e8)
DEFAULT_M = {1: 1024, 2: 256, 3: 32}
BOUNDARY_LAYER = 3
# integer weights over offsets -r..r and their common denominator
SECOND_DIFF = {2: ((1, -2, 1), 1), 4: ((-1, 16, -30, 16, -1), 12)}
FIRST_DIFF = {2: ((-1, 0, 1), 2), 4: ((1, -8, 0, 8, -1), 12)}


@dataclass
class MAProblem:
    polytope: object
    alpha: float
    tau: np.ndarray
    c: np.ndarray
    beta: np.ndarray
    reference: GridPotential
    grid: Grid
    s: float
    domain: np.ndarray  # nodes where the equation is imposed
    order: int = 4      # consistency order of the differences of psi

    def __post_init__(self):
        self.interior = binary_erosion(self.domain, iterations=BOUNDARY_LAYER, border_value=0)

    @property
    def n(self):
        return self.polytope.n

    @property
    def unknowns(self):
        return int(self.domain.sum())

    def at(self, s):
        """Same problem at another continuity parameter."""
        return MAProblem(self.polytope, self.alpha, self.tau, self.c, self.beta,
                         self.reference, self.grid, float(s), self.domain, self.order)

    def to_dict(self):
        return {"alpha": self.alpha, "tau": self.tau.tolist(), "c": self.c.tolist(),
                "beta": self.beta.tolist(), "s": self.s, "order": self.order,
                "grid": {"n": self.grid.n, "R": self.grid.R, "m": self.grid.m, "h": self.grid.h,
                         "center": list(self.grid.center), "domain_nodes": self.unknowns}}


def decay_rate(P, alpha, tau):
    """``alpha * dist(tau, boundary)``: the slowest exponential decay of exp(-w)."""
    return float(alpha) * P.inradius_at(np.asarray(tau, dtype=float))


def support_function(P, tau, rho):
    """``h(rho) = max_{x in P} (x - tau) . rho`` for rho of shape (..., n)."""
    V = P.vertex_array() - np.asarray(tau, dtype=float)
    return np.max(np.asarray(rho, dtype=float) @ V.T, axis=-1)


def default_box(P, alpha, tau, K=TRUNCATION_K):
    """Half-width and centre of the smallest cube containing ``{alpha h(rho) <= K}``.

    Since ``w >= alpha h - C``, ``exp(-w)`` is below ``e^-K`` up to a
    constant outside that set. The set is ``K / alpha`` times the polar body
    of ``P - tau``, whose vertices are ``-v_j / l_j(tau)``; its radius is at
    most ``K / decay_rate``.
    """
    tau = np.asarray(tau, dtype=float)
    polar = -P.normal_array / P.values(tau)[:, None] * (K / float(alpha))
    lo, hi = polar.min(axis=0), polar.max(axis=0)
    return float(np.max(hi - lo)) / 2, tuple((lo + hi) / 2)


def truncation_domain(P, alpha, tau, grid, K=TRUNCATION_K):
    """Grid nodes with ``alpha h(rho) <= K``.

    Outside this set the Hessian of the solution is far below ``e^-K`` and
    its discrete log-determinant is roundoff.
    """
    h = support_function(P, tau, grid.points())
    return float(alpha) * h <= K * (1 + 1e-9)


def setup_problem(P, alpha, tau=None, grid=None, *, s=None, soliton_tol=1e-12, K=TRUNCATION_K, order=4):
    """Assemble cone data, soliton field and reference potential.

    ``tau`` defaults to the barycenter (Kahler-Einstein case, ``c = 0``).
    ``grid`` is a :class:`Grid`, a pair ``(R, m)`` where either entry may be
    None for its default, or None. ``K`` sets the truncation level and
    ``order`` (2 or 4) the consistency order of the differences of ``psi``.
    """
    alpha = float(alpha)
    if order not in SECOND_DIFF:
        raise ValidationError(f"difference order must be 2 or 4, got {order}")
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    n = P.n
    if tau is None:
        tau = np.array([float(a) for a in P.barycenter])
        c = np.zeros(n)
    else:
        c = None
        tau = np.asarray(tau, dtype=float).reshape(n)
    vals = P.values(tau)
    if np.any(vals <= 0):
        raise InvalidAngles(f"tau={tau.tolist()} is not in the open polytope")
    if c is None:
        c = solve_soliton_field(P, tau, tol=soliton_tol)
    beta = alpha * vals
    if np.any(beta > 1.0 + 1e-12):
        raise InvalidAngles(f"cone angles {beta.tolist()} exceed 1")
    beta = np.minimum(beta, 1.0)
    if not isinstance(grid, Grid):
        R, m = (None, None) if grid is None else grid
        R0, center = default_box(P, alpha, tau, K)
        R = R0 if R is None else float(R)
        m = DEFAULT_M.get(n, 16) if m is None else int(m)
        grid = Grid(n, R, m, center)
    domain = truncation_domain(P, alpha, tau, grid, K)
    if domain.sum() < 5 ** n:
        raise ValidationError("truncation domain holds too few grid nodes")
    reference = legendre_to_rho(guillemin_potential(P, beta), grid)
    return MAProblem(P, alpha, tau, c, beta, reference, grid,
                     alpha if s is None else float(s), domain, int(order))


# -- discretization --------------------------------------------------------
#
# Far from the bulk, D^2 phi has eigenvalues of size exp(-w) in the directions
# of the facet normals v_j it approaches, while psi becomes constant along
# v_j. Axis-aligned differences would compute those tiny eigenvalues as
# differences of O(1) numbers. Instead each node uses second differences
# along the normals of a nearby vertex cone, B = [v_j, v_k, ...], and the
# sums v_a + v_b for the mixed terms. These are lattice vectors, so every
# stencil point is a grid node, and in that basis
#
#     det D^2 phi = det(B^T D^2 phi_hat B + M_psi) / det(B)^2,
#
# where B^T D^2 phi_hat B is the inverse of B^{-1} D^2 u_hat B^{-T}, a sum
# of rank one terms with the small facet values in the denominators.


class _Stencil:
    """Vertex-adapted difference operators on the truncation domain."""

    def __init__(self, problem):
        P, grid, ref = problem.polytope, problem.grid, problem.reference
        n, m, h = grid.n, grid.m, grid.h
        self.n, self.h = n, h
        V = P.normal_array
        beta = problem.beta
        dom = np.flatnonzero(problem.domain)
        self.size = dom.size

        x = ref.gradient.reshape(-1, n)
        lnorm = P.values(x) / np.linalg.norm(V, axis=1)
        cones = [v.active for v in P.vertex_fan.vertices
                 if len(v.active) == n and abs(np.linalg.det(V[list(v.active)])) > 0.5]
        score = np.stack([lnorm[:, list(a)].sum(axis=1) for a in cones], axis=1)
        choice = np.argmin(score, axis=1)

        # directions per cone: the n normals, then the pairwise sums
        self.cones = []
        width = 1
        for a in cones:
            B = V[list(a)].T.astype(int)
            dirs = [B[:, i] for i in range(n)]
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            dirs += [B[:, i] + B[:, j] for i, j in pairs]
            width = max(width, max(int(np.max(np.abs(d))) for d in dirs))
            self.cones.append((B, dirs, pairs))
        reach = len(SECOND_DIFF[problem.order][0]) // 2
        W = self.width = width * reach
        pshape = (m + 2 * W,) * n
        strides = np.array([int(np.prod(pshape[k + 1:])) for k in range(n)])
        self.strides = strides
        box_multi = np.array(np.unravel_index(np.arange(grid.size), grid.shape)).T + W
        self.pbox = box_multi @ strides            # padded flat index of each box node
        self.pdom = self.pbox[dom]
        self.ext = self._extension(problem, pshape, strides, box_multi, lnorm, V)

        # Wide stencils are only used where every point is a true domain
        # node: ghost values are copies and would spoil the higher order.
        real = np.zeros(int(np.prod(pshape)), dtype=bool)
        real[self.pdom] = True

        def covered(c, offsets, r):
            return np.all([real[c + k * o] for o in offsets for k in range(-r, r + 1)], axis=0)

        # per cone group and order: rows, offsets and the reference block in that basis
        self.groups = []
        ld = P.values(x[dom])
        for g, (B, dirs, pairs) in enumerate(self.cones):
            rows = np.flatnonzero(choice[dom] == g)
            if rows.size == 0:
                continue
            offs = [int(d @ strides) for d in dirs]
            wide = covered(self.pdom[rows], offs, reach) if reach > 1 else np.zeros(rows.size, dtype=bool)
            Binv = np.linalg.inv(B.astype(float))
            U = V @ Binv.T                       # rows: B^{-1} v_l
            logdetB2 = 2.0 * math.log(abs(np.linalg.det(B.astype(float))))
            for order, sel in ((problem.order, wide), (2, ~wide)):
                sub = rows[sel]
                if sub.size == 0:
                    continue
                G = np.einsum("kl,la,lb->kab", 1.0 / (beta[None, :] * ld[sub]), U, U)
                Href = _sym_inverse(G.astype(LD))
                self.groups.append((sub, offs, pairs, Href, logdetB2, B, order))
        self.grad_offs = [int(strides[k]) for k in range(n)]
        wide = covered(self.pdom, self.grad_offs, reach) if reach > 1 else np.zeros(self.size, dtype=bool)
        self.grad_groups = [(r, o) for r, o in ((np.flatnonzero(wide), problem.order),
                                                 (np.flatnonzero(~wide), 2)) if r.size]
        self.box_order = problem.order

    def _extension(self, problem, pshape, strides, box_multi, lnorm, V):
        """Padded node -> domain unknown, marching along the inward facet normal."""
        n = self.n
        W = self.width
        padded_dom = np.zeros(pshape, dtype=bool)
        padded_dom.reshape(-1)[self.pdom] = True
        ext = np.full(int(np.prod(pshape)), -1)
        ext[self.pdom] = np.arange(self.size)
        todo = np.flatnonzero(ext < 0)
        multi = np.array(np.unravel_index(todo, pshape)).T
        # facet nearest to the reference gradient at the closest box node
        m = problem.grid.m
        clamp = np.clip(multi - W, 0, m - 1)
        box_flat = np.ravel_multi_index(tuple(clamp.T), problem.grid.shape)
        step = V[np.argmin(lnorm[box_flat], axis=1)].astype(int)
        cur = multi.copy()
        live = np.ones(len(todo), dtype=bool)
        for _ in range(2 * max(pshape)):
            if not live.any():
                break
            cur[live] += step[live]
            inside = np.all((cur >= 0) & (cur < np.array(pshape)), axis=1)
            live &= inside
            flat = np.where(inside, cur @ strides, 0)
            hit = live & padded_dom.reshape(-1)[flat]
            ext[todo[hit]] = ext[flat[hit]]
            live &= ~hit
        left = ext < 0
        if left.any():
            _, idx = distance_transform_edt(~padded_dom, return_indices=True)
            near = np.ravel_multi_index(tuple(idx), pshape).reshape(-1)
            ext[left] = ext[near[left]]
        return ext

    def evaluate(self, u):
        """Hessian blocks (reference + psi, cone basis) and psi gradient on the domain."""
        pad = u[self.ext]
        n = self.n
        blocks = np.empty((self.size, n, n), dtype=LD)
        logdetB2 = np.empty(self.size)
        for rows, offs, pairs, Href, ldb, _, order in self.groups:
            c = self.pdom[rows]
            D = [_second(pad, c, o, self.h, order) for o in offs]
            M = Href.copy()
            for a in range(n):
                M[:, a, a] += D[a]
            for q, (a, b) in enumerate(pairs):
                mix = (D[n + q] - D[a] - D[b]) / 2
                M[:, a, b] += mix
                M[:, b, a] += mix
            blocks[rows] = M
            logdetB2[rows] = ldb
        grad = np.empty((self.size, n), dtype=LD)
        for rows, order in self.grad_groups:
            grad[rows] = np.stack([_first(pad, self.pdom[rows], o, self.h, order) for o in self.grad_offs], axis=1)
        return blocks, logdetB2, grad

    def jacobian(self, inv, c, s):
        """Linearization: sum_ab inv_ab D_ab + c . D + s."""
        n, h2 = self.n, self.h * self.h
        rows_all, cols_all, vals_all = [np.arange(self.size)], [np.arange(self.size)], [np.full(self.size, float(s))]

        def add(rows, o, w, weights, den):
            cc = self.pdom[rows]
            r = len(weights) // 2
            for k, f in enumerate(weights):
                if f:
                    rows_all.append(rows)
                    cols_all.append(self.ext[cc + (k - r) * o])
                    vals_all.append(w * (f / den))

        for rows, offs, pairs, _, _, _, order in self.groups:
            A = inv[rows]
            weights, den = SECOND_DIFF[order]
            for a in range(n):
                w = A[:, a, a].copy()
                for b in range(n):
                    if b != a:
                        w -= A[:, a, b]
                add(rows, offs[a], w, weights, den * h2)
            for q, (a, b) in enumerate(pairs):
                add(rows, offs[n + q], A[:, a, b], weights, den * h2)
        for rows, order in self.grad_groups:
            weights, den = FIRST_DIFF[order]
            for k, o in enumerate(self.grad_offs):
                if c[k] != 0.0:
                    add(rows, o, np.full(rows.size, float(c[k])), weights, den * self.h)
        return sp.csr_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                             shape=(self.size, self.size))

    def on_box(self, u):
        """Domain values -> box array (ghost nodes by extension)."""
        return u[self.ext[self.pbox]]

    def box_derivatives(self, u):
        """Axis central differences of the extended field on the whole box."""
        pad = u[self.ext]
        n = self.n
        h, order = self.h, self.box_order
        g = np.stack([_first(pad, self.pbox, o, h, order) for o in self.grad_offs], axis=1)
        H = np.empty((self.pbox.size, n, n), dtype=u.dtype)
        D = [_second(pad, self.pbox, o, h, order) for o in self.grad_offs]
        for a, oa in enumerate(self.grad_offs):
            H[:, a, a] = D[a]
            for b in range(a + 1, n):
                ob = self.grad_offs[b]
                H[:, a, b] = H[:, b, a] = (_second(pad, self.pbox, oa + ob, h, order) - D[a] - D[b]) / 2
        return g, H


def _difference(table, pad, c, o, scale):
    weights, den = table
    r = len(weights) // 2
    acc = sum(LD(w) * pad[c + (k - r) * o] for k, w in enumerate(weights) if w)
    return acc / LD(den * scale)


def _second(pad, c, o, h, order):
    return _difference(SECOND_DIFF[order], pad, c, o, h * h)


def _first(pad, c, o, h, order):
    return _difference(FIRST_DIFF[order], pad, c, o, h)


def _sym_inverse(G):
    n = G.shape[-1]
    if n == 1:
        return 1 / G
    if n == 2:
        a, b, d = G[:, 0, 0], G[:, 0, 1], G[:, 1, 1]
        det = a * d - b * b
        return np.stack([np.stack([d / det, -b / det], -1), np.stack([-b / det, a / det], -1)], -2)
    return np.linalg.inv(G.astype(float)).astype(G.dtype)


def _stencil(problem):
    st = problem.__dict__.get("_stencil_cache")
    if st is None:
        st = _Stencil(problem)
        problem.__dict__["_stencil_cache"] = st
    return st


@dataclass(frozen=True)
class _Psi:
    """``psi = offset + u`` on domain nodes; keeping the constant apart stops
    it from eating the digits the difference quotients of ``u`` need."""

    offset: np.longdouble
    u: np.ndarray

    @classmethod
    def from_values(cls, a):
        a = np.asarray(a, dtype=LD)
        mean = a.mean()
        return cls(mean, a - mean)

    def total(self):
        return self.offset + self.u

    def step(self, d, lam=1.0):
        dc = float(np.mean(d))
        return _Psi(self.offset + LD(lam * dc), self.u + LD(lam) * (d - dc).astype(LD))

    def shifted(self, a):
        return _Psi(self.offset + LD(a), self.u)


class _State:
    """Residual data for one ``psi`` at one ``s`` (arrays over domain nodes)."""

    def __init__(self, problem, psi, s, kappa=0.0):
        ref = problem.reference
        n = problem.n
        mask = problem.domain
        stencil = _stencil(problem)
        M, logdetB2, g = stencil.evaluate(psi.u)
        if n == 1:
            det = M[:, 0, 0]
            convex = det > 0
        elif n == 2:
            det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] ** 2
            convex = (M[:, 0, 0] > 0) & (det > 0)
        else:
            Md = M.astype(float)
            convex = np.all(np.linalg.eigvalsh(Md) > 0, axis=-1)
            det = np.linalg.det(np.where(convex[:, None, None], Md, np.eye(n))).astype(LD)
        safe = np.where(convex[:, None, None], M, np.eye(n, dtype=LD))
        self.convex = convex
        self.inv = _sym_inverse(safe).astype(float)
        self.logdet = np.log(np.where(convex, det, 1.0)) - LD(1) * logdetB2
        rho = problem.grid.points()[mask]
        lin = problem.alpha * (ref.values[mask] - rho @ problem.tau)
        gf = ref.gradient[mask].astype(LD) + g
        r = self.logdet + LD(lin) + LD(s) * psi.total() + (gf @ problem.c.astype(LD)) - LD(kappa)
        self.r = np.where(convex, r, np.nan)

    def field(self, problem):
        out = np.full(problem.grid.shape, np.nan)
        out[problem.domain] = self.r.astype(float)
        return out


def _gauge_data(problem, psi, s):
    """Normalized identity vector over the domain and its derivative in psi."""
    ref = problem.reference
    mask = problem.domain
    rho = problem.grid.points()[mask]
    q = ref.gradient[mask] - problem.tau
    w = LD(problem.alpha) * LD(ref.values[mask] - rho @ problem.tau) + LD(s) * psi.total()
    e = np.exp(-(w - w.min()))
    Z = e.sum()
    G = (q.T.astype(LD) @ e) / Z
    # d/dpsi_k of sum q e / sum e = -s e_k (q_k - G) / Z
    dG = (-LD(s) * e[:, None] * (q.astype(LD) - G[None, :]) / Z).astype(float)
    return G.astype(float), dG


@dataclass
class SolveConfig:
    tol: float | None = None         # sup residual target over the domain
    steps: int = 8                  # uniform continuity steps in s
    max_newton: int = 40
    max_halvings: int = 8
    gauge: bool = True               # impose the identity at s = alpha
    initial_psi: np.ndarray | None = None  # warm start, tried directly at s = alpha
    warm_give_up: float = 2.0        # drop the warm start once |F| exceeds this multiple of its best
    verbose: bool = False

    def resolved_tol(self, n):
        return self.tol if self.tol is not None else (1e-7 if n == 1 else 1e-6)


@dataclass
class StepRecord:
    s: float
    iterations: int
    residual_sup: float
    identity: list

    def to_dict(self):
        return {"s": self.s, "iterations": self.iterations,
                "residual_sup": self.residual_sup, "identity": self.identity}


@dataclass
class SolveReport:
    problem: MAProblem
    phi: GridPotential
    steps: list
    iterations: int
    residual_sup: float
    residual_l2: float
    boundary_residual_sup: float
    gauge_multiplier: list
    kappa: float
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    warm_start: str = "none"         # none, accepted or rejected
    wasted_iterations: int = 0       # spent in abandoned Newton runs, included in iterations

    @property
    def iterations_per_step(self):
        return [st.iterations for st in self.steps]

    def to_dict(self):
        return {"problem": self.problem.to_dict(),
                "iterations": self.iterations,
                "residual_sup": self.residual_sup, "residual_l2": self.residual_l2,
                "boundary_residual_sup": self.boundary_residual_sup,
                "gauge_multiplier": self.gauge_multiplier, "kappa": self.kappa,
                "steps": [st.to_dict() for st in self.steps],
                "warm_start": self.warm_start, "wasted_iterations": self.wasted_iterations,
                "diagnostics": self.diagnostics, "wall_time": self.wall_time}


class _NewtonFailure(Exception):
    def __init__(self, history, nonconvex=None):
        super().__init__("newton failed")
        self.history = history
        self.nonconvex = nonconvex


def _newton(problem, psi, s, mode, tol, max_iter, log=None, give_up=None):
    """Damped Newton at fixed ``s``; ``mode`` is 'kappa', 'plain' or 'gauge'.

    With ``give_up`` the run is abandoned as soon as the sup residual exceeds
    that multiple of the best value seen so far.
    """
    n, M = problem.n, problem.unknowns
    mask = problem.domain
    stencil = _stencil(problem)
    kappa = 0.0
    mu = np.zeros(n)
    q = problem.reference.gradient[mask] - problem.tau

    def assemble(psi, kappa, mu):
        st = _State(problem, psi, s, kappa)
        if not st.convex.all():
            return st, None
        if mode == "kappa":
            extra = np.array([float(psi.offset + np.mean(psi.u))])
            F = np.concatenate([st.r.astype(float), extra])
        elif mode == "gauge":
            G, _ = _gauge_data(problem, psi, s)
            F = np.concatenate([(st.r + (q @ mu).astype(LD)).astype(float), G])
        else:
            F = st.r.astype(float)
        return st, F

    if mode == "kappa":
        # start with the constant that makes the mean residual vanish
        st, F = assemble(psi, 0.0, mu)
        if F is None:
            raise _NewtonFailure([], np.flatnonzero(mask)[~st.convex])
        kappa = float(np.mean(st.r))
    st, F = assemble(psi, kappa, mu)
    if F is None:
        raise _NewtonFailure([], np.flatnonzero(mask)[~st.convex])
    history = []
    for it in range(max_iter + 1):
        norm = float(np.max(np.abs(F)))
        history.append(norm)
        if log:
            log(f"  s={s:.6g} it={it} |F|={norm:.3e}")
        if norm <= tol:
            return psi, kappa, mu, it, history
        if it == max_iter or (give_up is not None and norm > give_up * min(history)):
            break
        J = stencil.jacobian(st.inv, problem.c, s)
        if mode == "kappa":
            col = sp.csr_matrix(-np.ones((M, 1)))
            row = sp.csr_matrix(np.full((1, M), 1.0 / M))
            A = sp.bmat([[J, col], [row, None]], format="csc")
        elif mode == "gauge":
            _, dG = _gauge_data(problem, psi, s)
            A = sp.bmat([[J, sp.csr_matrix(q)], [sp.csr_matrix(dG.T), None]], format="csc")
        else:
            A = J.tocsc()
        try:
            delta = splu(A).solve(-F)
        except RuntimeError as err:  # singular factor
            raise _NewtonFailure(history) from err
        dpsi = delta[:M]
        dk = float(delta[M]) if mode == "kappa" else 0.0
        dmu = delta[M:M + n] if mode == "gauge" else np.zeros(n)
        lam = 1.0
        l2 = float(np.linalg.norm(F))
        while True:
            trial = (psi.step(dpsi, lam), kappa + lam * dk, mu + lam * dmu)
            st_t, F_t = assemble(*trial)
            if F_t is not None and float(np.linalg.norm(F_t)) <= (1 - 1e-4 * lam) * l2:
                break
            lam *= 0.5
            if lam < 2.0 ** -12:
                bad = None if F_t is not None else np.flatnonzero(mask)[~st_t.convex]
                raise _NewtonFailure(history, bad)
        (psi, kappa, mu), st, F = trial, st_t, F_t
    raise _NewtonFailure(history)


def _convex_start(problem, values, halvings=4):
    """Scale a warm start toward ``psi = 0`` until it is discretely convex."""
    psi = _Psi.from_values(values)
    for _ in range(halvings + 1):
        if _State(problem, psi, problem.alpha).convex.all():
            return psi
        psi = _Psi(psi.offset, psi.u / 2)
    return None


def solve_continuity(problem, config=None):
    """Follow the path from ``s = 0`` to ``s = alpha`` with damped Newton.

    The s-steps start uniform and are halved whenever Newton fails, up to
    ``config.max_halvings`` times. Raises NonConvergence, or
    NonConvexIterate when a failure was caused by loss of convexity.
    """
    config = config or SolveConfig()
    t0 = time.perf_counter()
    tol = config.resolved_tol(problem.n)
    log = print if config.verbose else None
    alpha = problem.alpha
    final_mode = "gauge" if config.gauge else "plain"
    steps = []
    total = 0

    def record(psi, s, its, kappa=0.0):
        st = _State(problem, psi, s, kappa)
        G, _ = _gauge_data(problem, psi, s)
        steps.append(StepRecord(float(s), its, float(np.max(np.abs(st.r))), G.tolist()))

    def fail(message, s, err):
        if err.nonconvex is not None and len(err.nonconvex):
            raise NonConvexIterate(err.nonconvex.tolist()) from None
        raise NonConvergence(message, iterations=total,
                             residual=err.history[-1] if err.history else None,
                             s=float(s), history=err.history) from None

    psi = kappa = mu = None
    warm, wasted = "none", 0
    if config.initial_psi is not None:
        warm = "rejected"
        start = _convex_start(problem, np.asarray(config.initial_psi)[problem.domain])
        if start is not None:
            try:
                psi, kappa, mu, its, _ = _newton(problem, start, alpha, final_mode, tol, config.max_newton,
                                                 log, give_up=config.warm_give_up)
                total += its
                record(psi, alpha, its)
                warm = "accepted"
            except _NewtonFailure as err:
                psi = None
                wasted += max(len(err.history) - 1, 0)
    if psi is None:
        psi0 = _Psi(LD(0), np.zeros(problem.unknowns, dtype=LD))
        try:
            psi, kappa, _, its, _ = _newton(problem, psi0, 0.0, "kappa", tol, config.max_newton, log)
        except _NewtonFailure as err:
            fail("Newton failed at s=0", 0.0, err)
        total += its
        record(psi, 0.0, its, kappa)
        s = 0.0
        ds = alpha / config.steps
        halvings = 0
        while s < alpha:
            s_next = min(alpha, s + ds)
            if alpha - s_next < 1e-12 * alpha:
                s_next = alpha
            start = psi.shifted(-kappa / s_next) if s == 0.0 else psi
            mode = final_mode if s_next == alpha else "plain"
            try:
                new, _, mu, its, _ = _newton(problem, start, s_next, mode, tol, config.max_newton, log)
            except _NewtonFailure as err:
                wasted += max(len(err.history) - 1, 0)
                halvings += 1
                if halvings > config.max_halvings:
                    fail(f"continuity stalled at s={s_next}", s_next, err)
                ds *= 0.5
                continue
            psi, s = new, s_next
            total += its
            record(psi, s, its)
    phi = _potential(problem, psi)
    r = _State(problem, psi, alpha).field(problem)
    inner = problem.interior
    layer = problem.domain & ~inner
    rep = SolveReport(problem, phi, steps, total + wasted,
                      residual_sup=float(np.max(np.abs(r[inner]))),
                      residual_l2=float(np.sqrt(np.sum(r[inner] ** 2) * problem.grid.h ** problem.n)),
                      boundary_residual_sup=float(np.max(np.abs(r[layer]))) if layer.any() else 0.0,
                      gauge_multiplier=[float(a) for a in (mu if mu is not None else np.zeros(problem.n))],
                      kappa=float(kappa), warm_start=warm, wasted_iterations=wasted)
    rep.diagnostics = diagnostics(problem, phi)
    rep.wall_time = time.perf_counter() - t0
    return rep


# -- diagnostics -------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    sup_norm: float
    l2_norm: float
    field: np.ndarray  # NaN off the domain


def _potential(problem, psi):
    """Solved potential on the box with gradient and Hessian filled in.

    Domain nodes get the cone-basis Hessian mapped back to coordinates,
    ghost nodes axis differences of the extended deviation.
    """
    ref = problem.reference
    stencil = _stencil(problem)
    n = problem.n
    dev = stencil.on_box(psi.u).reshape(problem.grid.shape)
    g, H = stencil.box_derivatives(psi.u)
    grad = ref.gradient + g.astype(float).reshape(ref.gradient.shape)
    hess = (ref.hessian.reshape(-1, n, n) + H.astype(float))
    blocks, _, _ = stencil.evaluate(psi.u)
    dom = np.flatnonzero(problem.domain)
    for rows, _, _, _, _, B, _ in stencil.groups:
        Binv = np.linalg.inv(B.astype(float))
        hess[dom[rows]] = np.einsum("ia,kab,bj->kij", Binv.T, blocks[rows].astype(float), Binv)
    values = ref.values + (psi.offset + dev).astype(float)
    return GridPotential(problem.grid, values, gradient=grad, hessian=hess.reshape(ref.hessian.shape),
                         base=ref, deviation=dev, meta={"deviation_offset": float(psi.offset)})


def _deviation(problem, phi):
    if phi.base is problem.reference and phi.deviation is not None:
        return _Psi(LD(phi.meta.get("deviation_offset", 0.0)), np.asarray(phi.deviation, dtype=LD)[problem.domain])
    if phi.grid != problem.grid:
        raise ValidationError("potential and problem use different grids")
    diff = np.asarray(phi.values, dtype=LD) - problem.reference.values.astype(LD)
    return _Psi.from_values(diff[problem.domain])


def residual(problem, phi, s=None):
    """Pointwise residual of the path equation at ``s`` (default problem.s).

    Norms are over domain nodes at least three nodes from its edge.
    """
    s = problem.s if s is None else float(s)
    st = _State(problem, _deviation(problem, phi), s)
    inner = problem.interior
    convex = np.zeros(problem.grid.shape, dtype=bool)
    convex[problem.domain] = st.convex
    bad = inner & ~convex
    if bad.any():
        raise NonConvexIterate(np.flatnonzero(bad.ravel()).tolist())
    r = st.field(problem)
    return ResidualReport(float(np.max(np.abs(r[inner]))),
                          float(np.sqrt(np.sum(r[inner] ** 2) * problem.grid.h ** problem.n)), r)


def identity_check(problem, phi, s=None):
    """``int (D phi_hat - tau) exp(-w_s) / int exp(-w_s)`` over the domain."""
    s = problem.s if s is None else float(s)
    G, _ = _gauge_data(problem, _deviation(problem, phi), s)
    return G


def volume_check(problem, phi):
    """``int det D^2 phi drho`` over the domain."""
    det = np.zeros(problem.grid.shape)
    st = _State(problem, _deviation(problem, phi), problem.s)
    det[problem.domain] = np.where(st.convex, np.exp(st.logdet.astype(float)), 0.0)
    w = np.where(problem.domain, 1.0, 0.0)
    for k in range(problem.n):  # trapezoid weights on the box faces
        idx = [slice(None)] * problem.n
        for end in (0, -1):
            idx[k] = end
            w[tuple(idx)] *= 0.5
    return float(np.sum(det * w) * problem.grid.h ** problem.n)


def diagnostics(problem, phi):
    vol = volume_check(problem, phi)
    exact = float(problem.polytope.volume)
    img = moment_map_image(phi, problem.polytope, problem.domain)
    return {"volume": vol, "volume_exact": exact, "volume_rel_error": abs(vol - exact) / exact,
            "identity": identity_check(problem, phi, problem.alpha).tolist(),
            "moment_image": img.to_dict(), "h": problem.grid.h}


# -- independent one dimensional oracle -----------------------------------------

def _chebyshev(N):
    """Chebyshev-Lobatto nodes on [-1, 1] and the differentiation matrix."""
    k = np.arange(N + 1)
    x = np.cos(np.pi * k / N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** k
    X = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (X + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return x, D


def _clenshaw_curtis(N):
    """Clenshaw-Curtis weights for the nodes of :func:`_chebyshev` (N even)."""
    theta = np.pi * np.arange(N + 1) / N
    w = np.zeros(N + 1)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N * N - 1)
        for k in range(1, N // 2):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
        v -= np.cos(N * theta[1:-1]) / (N * N - 1)
    else:
        w[0] = w[N] = 1.0 / (N * N)
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
    w[1:-1] = 2 * v / N
    return w


@dataclass
class OracleSolution:
    nodes: np.ndarray
    f: np.ndarray
    potential: object
    iterations: int
    residual: float
    gauge: float

    def smooth_part(self, x):
        return BarycentricInterpolator(self.nodes, self.f)(np.asarray(x, dtype=float))

    def u(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return self.potential.value(x[:, None]) + self.smooth_part(x)


def ode_oracle_1d(problem, N=64, tol=1e-10, max_iter=60):
    """Spectral collocation for ``u = u_hat + f`` on the interval.

    With ``L = prod_j l_j`` the equation ``u'' = exp(-alpha u + alpha (x - tau) u' + c x)``
    becomes the smooth problem

        L f'' + sum_j beta_j^{-1} prod_{k != j} l_k
            = exp(sum_j (l_j / l_j(tau) - 1) - alpha f + alpha (x - tau) f' + c x),

    degenerate at both ends. The affine freedom ``f -> f + a (x - tau)`` is
    fixed by ``int_P (x_hat(x) - tau) exp(c x) dx = 0`` where
    ``u_hat'(x_hat) = u'(x)``, the condition the continuity path selects.
    The overdetermined system is solved by Gauss-Newton.
    """
    P = problem.polytope
    if P.n != 1:
        raise ValidationError("the oracle is one dimensional")
    alpha, tau, c = problem.alpha, float(problem.tau[0]), float(problem.c[0])
    beta = problem.beta
    a, b = sorted(float(v[0]) for v in P.vertex_fan.points())
    t, D = _chebyshev(N)
    x = 0.5 * (b - a) * (t + 1) + a
    D = D * 2.0 / (b - a)
    D2 = D @ D
    w = _clenshaw_curtis(N) * 0.5 * (b - a)
    l = P.values(x[:, None])            # (N+1, J)
    ltau = P.values(np.array([tau]))
    V = P.normal_array[:, 0]
    L = np.prod(l, axis=1)
    S = np.zeros_like(x)
    for j in range(P.N):
        S += V[j] ** 2 / beta[j] * np.prod(np.delete(l, j, axis=1), axis=1)
    A = np.sum(l / ltau - 1.0, axis=1)
    u_hat = guillemin_potential(P, beta)
    inside = (x > a) & (x < b)
    ex = np.exp(c * (x - tau))
    uprime_hat = np.zeros_like(x)
    uprime_hat[inside] = u_hat.gradient(x[inside, None])[:, 0]

    def equations(f):
        fp, fpp = D @ f, D2 @ f
        B = np.exp(A - alpha * f + alpha * (x - tau) * fp + c * x)
        E = L * fpp + S - B
        xh = x.copy()
        xh[inside] = invert_gradient(u_hat, (uprime_hat[inside] + fp[inside])[:, None], x0=None)[:, 0]
        hh = np.ones_like(x)
        hh[inside] = u_hat.hessian(xh[inside, None])[:, 0, 0]
        g = float(np.sum(w * (xh - tau) * ex))
        dg = np.where(inside, w * ex / hh, 0.0) @ D
        JE = L[:, None] * D2 - B[:, None] * (-alpha * np.eye(N + 1) + alpha * (x - tau)[:, None] * D)
        return E, g, JE, dg

    # constant start balancing the equation at tau, where the sum of log terms vanishes
    i_tau = int(np.argmin(np.abs(x - tau)))
    f = np.full(N + 1, (c * tau - math.log(S[i_tau])) / alpha)
    for it in range(max_iter):
        E, g, JE, dg = equations(f)
        res = max(float(np.max(np.abs(E))), abs(g))
        if res <= tol:
            return OracleSolution(x, f, u_hat, it, float(np.max(np.abs(E))), g)
        F = np.concatenate([E, [g]])
        Jm = np.vstack([JE, dg[None, :]])
        step = np.linalg.lstsq(Jm, -F, rcond=None)[0]
        lam = 1.0
        while lam > 2.0 ** -20:
            E2, g2, _, _ = equations(f + lam * step)
            if np.all(np.isfinite(E2)) and np.linalg.norm(np.concatenate([E2, [g2]])) <= (1 - 1e-4 * lam) * np.linalg.norm(F):
                break
            lam *= 0.5
        else:
            raise OracleNonConvergence("oracle line search failed", it, res)
        f = f + lam * step
    raise OracleNonConvergence("oracle did not converge", max_iter, res)


def compare_with_oracle(report, oracle, margin=0.05, points=401):
    """Sup difference of symplectic potentials on the interval shrunk by ``margin``.

    The solved ``u`` comes from the discrete conjugate of ``report.phi``.
    """
    from .transform import legendre_to_x

    P = report.problem.polytope
    a, b = sorted(float(v[0]) for v in P.vertex_fan.points())
    d = margin * (b - a)
    x = np.linspace(a + d, b - d, points)
    u = legendre_to_x(report.phi, x[:, None]).u
    diff = u - oracle.u(x)
    return {"sup": float(np.max(np.abs(diff))), "interval": [a + d, b - d], "points": points,
            "x": x.tolist(), "u_solver": u.tolist(), "u_oracle": oracle.u(x).tolist()}
