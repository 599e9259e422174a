"""Symplectic potentials on a polytope and their Legendre duals on a grid.

On the polytope side a conical potential has the Guillemin form

    u(x) = sum_j beta_j^{-1} l_j(x) log l_j(x) + f(x),

and on the logarithmic side ``phi(rho) = sup_x (x . rho - u(x))``. The
reference potential ``phi_hat`` is computed node by node by inverting
``grad u(x) = rho`` with a damped Newton iteration that never lets a facet
value drop by more than half in one step; since the sup is attained at that
critical point this gives ``phi_hat`` to roundoff together with its exact
gradient ``x`` and Hessian ``(hess u(x))^{-1}``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.optimize import nnls
from scipy.spatial import ConvexHull, QhullError

from .errors import EvaluationOutsideDomain, InversionFailure, ValidationError


@dataclass(frozen=True)
class SmoothPart:
    """Smooth correction ``f`` with vectorized value, gradient and Hessian."""

    value: callable
    gradient: callable
    hessian: callable


class SymplecticPotential:
    """``u = sum_j beta_j^{-1} l_j log l_j + f`` on the closed polytope."""

    def __init__(self, polytope, beta, smooth=None):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (polytope.N,):
            raise ValidationError(f"need {polytope.N} cone angles, got {beta.shape}")
        if np.any(beta <= 0):
            raise ValidationError("cone angles must be positive")
        self.polytope = polytope
        self.beta = beta
        self.smooth = smooth
        self._V = polytope.normal_array
        self._w = 1.0 / beta

    def _l(self, x, strict):
        x = np.asarray(x, dtype=float)
        l = self.polytope.values(x)
        bad = l <= 0 if strict else l < 0
        if np.any(bad):
            raise EvaluationOutsideDomain("point outside the open polytope")
        return x, l

    def value(self, x):
        x, l = self._l(x, strict=False)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(l > 0, l * np.log(np.where(l > 0, l, 1.0)), 0.0)
        out = t @ self._w
        if self.smooth is not None:
            out = out + self.smooth.value(x)
        return out

    def gradient(self, x):
        x, l = self._l(x, strict=True)
        out = (self._w * (1.0 + np.log(l))) @ self._V
        if self.smooth is not None:
            out = out + self.smooth.gradient(x)
        return out

    def hessian(self, x):
        x, l = self._l(x, strict=True)
        coef = self._w / l
        out = np.einsum("...j,ja,jb->...ab", coef, self._V, self._V)
        if self.smooth is not None:
            out = out + self.smooth.hessian(x)
        return out


def guillemin_potential(P, beta):
    """Reference potential ``sum_j beta_j^{-1} l_j log l_j``."""
    return SymplecticPotential(P, beta)


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``m`` points per axis on ``center + [-R, R]^n``."""

    n: int
    R: float
    m: int
    center: tuple | None = None

    def __post_init__(self):
        if self.m < 5 or self.R <= 0 or self.n < 1:
            raise ValidationError(f"invalid grid n={self.n} R={self.R} m={self.m}")
        c = (0.0,) * self.n if self.center is None else tuple(float(a) for a in self.center)
        if len(c) != self.n:
            raise ValidationError(f"grid center has length {len(c)}, expected {self.n}")
        object.__setattr__(self, "center", c)

    @property
    def h(self):
        return 2.0 * self.R / (self.m - 1)

    @property
    def axes(self):
        base = np.linspace(-self.R, self.R, self.m)
        return [c + base for c in self.center]

    @property
    def lower(self):
        return np.array(self.center) - self.R

    @property
    def upper(self):
        return np.array(self.center) + self.R

    @property
    def shape(self):
        return (self.m,) * self.n

    @property
    def size(self):
        return self.m ** self.n

    def points(self):
        """Node coordinates of shape ``(m, ..., m, n)`` in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def interior_mask(self, width=1):
        """True at nodes at least ``width`` nodes away from the box faces."""
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.n):
            idx = [slice(None)] * self.n
            idx[k] = slice(0, width)
            mask[tuple(idx)] = False
            idx[k] = slice(self.m - width, self.m)
            mask[tuple(idx)] = False
        return mask


@dataclass(eq=False)
class GridPotential:
    """Convex potential sampled on a uniform grid in logarithmic coordinates.

    ``gradient`` and ``hessian`` are filled for reference potentials, where
    they are known exactly. A solved potential keeps a link to its reference
    (``base``) and the deviation ``psi = phi - phi_hat`` in extended
    precision, minus its constant part ``meta["deviation_offset"]``; the
    residual evaluation differentiates it.
    """

    grid: Grid
    values: np.ndarray
    is_reference: bool = False
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None
    potential: SymplecticPotential | None = None
    base: "GridPotential | None" = None
    deviation: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.grid.n

    @property
    def m(self):
        return self.grid.m

    @property
    def R(self):
        return self.grid.R

    @property
    def h(self):
        return self.grid.h

    def derivatives(self):
        """Gradient and Hessian fields on the whole grid.

        Exact for references; base plus reflected central differences of the
        deviation for solved potentials; plain central differences (NaN on
        the outer layer) otherwise.
        """
        if self.gradient is not None and self.hessian is not None:
            return self.gradient, self.hessian
        if self.base is not None and self.deviation is not None:
            g, H = self.base.derivatives()
            dg, dH = central_differences(self.deviation, self.h, reflect=True)
            return g + dg.astype(float), H + dH.astype(float)
        return central_differences(self.values, self.h, reflect=False)

    # serialization -----------------------------------------------------

    def to_csv(self, path):
        pts = self.grid.points().reshape(-1, self.n)
        data = np.column_stack([pts, self.values.reshape(-1)])
        header = ",".join([f"rho{k + 1}" for k in range(self.n)] + ["phi"])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    def to_binary(self, path):
        """Little-endian layout: int64 n, int64 m, float64 R, n float64 center, then values."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qqd", self.n, self.m, self.R))
            fh.write(np.asarray(self.grid.center, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path):
        raw = Path(path).read_bytes()
        n, m, R = struct.unpack_from("<qqd", raw)
        center = np.frombuffer(raw, dtype="<f8", count=n, offset=24)
        vals = np.frombuffer(raw, dtype="<f8", offset=24 + 8 * n)
        if vals.size != m ** n:
            raise ValidationError(f"binary potential holds {vals.size} values, expected {m ** n}")
        grid = Grid(int(n), float(R), int(m), tuple(center))
        return cls(grid, vals.reshape((m,) * n).astype(float))

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n = data.shape[1] - 1
        m = int(round(data.shape[0] ** (1.0 / n)))
        lo, hi = data[:, :n].min(axis=0), data[:, :n].max(axis=0)
        grid = Grid(n, float(np.max(hi - lo)) / 2, m, tuple((lo + hi) / 2))
        return cls(grid, data[:, -1].reshape((m,) * n))


def central_differences(a, h, reflect):
    """Second order central gradient and Hessian of a grid array.

    With ``reflect`` the array is mirrored across each face (homogeneous
    Neumann data); otherwise the outer layer is NaN.
    """
    n = a.ndim
    if reflect:
        p = np.pad(a, 1, mode="reflect")
    else:
        p = np.pad(np.asarray(a, dtype=float), 1, mode="constant", constant_values=np.nan)
    core = tuple([slice(1, -1)] * n)

    def shifted(offsets):
        return p[tuple(slice(1 + o, p.shape[k] - 1 + o) for k, o in enumerate(offsets))]

    grad = np.empty(a.shape + (n,), dtype=p.dtype)
    hess = np.empty(a.shape + (n, n), dtype=p.dtype)
    centre = p[core]
    for i in range(n):
        e = [0] * n
        e[i] = 1
        fwd, bwd = shifted(e), shifted([-o for o in e])
        grad[..., i] = (fwd - bwd) / (2 * h)
        hess[..., i, i] = (fwd - 2 * centre + bwd) / (h * h)
        for j in range(i + 1, n):
            pp = [0] * n
            pp[i], pp[j] = 1, 1
            pm = list(pp)
            pm[j] = -1
            mp = [-o for o in pm]
            mm = [-o for o in pp]
            d = (shifted(pp) - shifted(pm) - shifted(mp) + shifted(mm)) / (4 * h * h)
            hess[..., i, j] = d
            hess[..., j, i] = d
    return grad, hess


# -- Legendre transforms -----------------------------------------------------

def invert_gradient(u, rho, x0=None, max_iter=400, tol=1e-12):
    """Solve ``grad u(x) = rho`` for a batch of targets ``rho`` of shape (K, n)."""
    P = u.polytope
    V = P.normal_array
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    K, n = rho.shape
    start = P.vertex_array().mean(axis=0) if x0 is None else np.asarray(x0, dtype=float)
    x = np.broadcast_to(start, (K, n)).copy()
    todo = np.arange(K)
    for _ in range(max_iter):
        if todo.size == 0:
            return x
        xt, rt = x[todo], rho[todo]
        g = u.gradient(xt) - rt
        H = u.hessian(xt)
        dx = -np.linalg.solve(H, g[..., None])[..., 0]
        l = P.values(xt)
        ldot = dx @ V.T
        with np.errstate(divide="ignore"):
            ratio = np.where(ldot < 0, -0.5 * l / np.where(ldot < 0, ldot, -1.0), np.inf)
        step = np.minimum(1.0, ratio.min(axis=1))
        F0 = u.value(xt) - np.einsum("ka,ka->k", rt, xt)
        slope = np.einsum("ka,ka->k", g, dx)
        for _ in range(60):
            xn = xt + step[:, None] * dx
            F1 = u.value(xn) - np.einsum("ka,ka->k", rt, xn)
            bad = F1 > F0 + 1e-4 * step * slope + 1e-15 * (1 + np.abs(F0))
            # once the predicted decrease is below the rounding noise of F,
            # accept steps that shrink the gradient residual instead
            tiny = bad & (-slope * step < 1e-12 * (1 + np.abs(F0)))
            if tiny.any():
                k = np.flatnonzero(tiny)
                g1 = u.gradient(xn[k]) - rt[k]
                bad[k[np.max(np.abs(g1), axis=1) < np.max(np.abs(g[k]), axis=1)]] = False
            if not bad.any():
                break
            step = np.where(bad, 0.5 * step, step)
        x[todo] = xn
        rel = np.max(np.abs(ldot) / l, axis=1) * step
        # near a facet l_j = v_j . x + lambda_j carries a relative rounding
        # error of eps |x| / l_j, which bounds the attainable gradient residual
        scale = np.abs(V) @ np.ones(n)
        noise = 16 * np.finfo(float).eps * (
            (u._w * scale * (scale * np.abs(xt).max(axis=1, keepdims=True) + np.abs(P.offset_array)) / l).sum(axis=1)
            + np.abs(rt).max(axis=1))
        gmax = np.max(np.abs(g), axis=1)
        done = (rel < tol) | (gmax < tol * (1 + np.max(np.abs(rt), axis=1))) | (gmax < noise)
        todo = todo[~done]
    if todo.size:
        k = int(todo[0])
        raise InversionFailure(k, float(np.max(np.abs(u.gradient(x[k]) - rho[k]))))
    return x


def legendre_to_rho(u, grid):
    """Sample ``phi = L(u)`` on ``grid`` with exact gradient and Hessian."""
    n = u.polytope.n
    if grid.n != n:
        raise ValidationError(f"grid dimension {grid.n} does not match polytope dimension {n}")
    rho = grid.points().reshape(-1, n)
    x = invert_gradient(u, rho)
    phi = np.einsum("ka,ka->k", x, rho) - u.value(x)
    H = np.linalg.inv(u.hessian(x))
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return GridPotential(grid, phi.reshape(grid.shape), is_reference=True,
                         gradient=x.reshape(grid.shape + (n,)),
                         hessian=H.reshape(grid.shape + (n, n)), potential=u)


@dataclass(frozen=True)
class ConjugateSamples:
    x: np.ndarray
    u: np.ndarray
    error: np.ndarray  # estimate; inf where the max sits on the box boundary


def legendre_to_x(phi, x, chunk=256):
    """Discrete convex conjugate ``u(x) = max_rho (x . rho - phi(rho))``.

    The max over grid nodes is refined by a few Newton steps on an
    interpolating spline of ``phi`` (cubic in 1-D, bicubic in 2-D) started
    at the best node; in higher dimension a local quadratic model from
    central differences is maximized instead. The error estimate is the gap
    between the spline refinement and the quadratic one.
    """
    grid = phi.grid
    n = grid.n
    x = np.asarray(x, dtype=float).reshape(-1, n)
    pts = grid.points().reshape(-1, n)
    vals = phi.values.reshape(-1)
    best = np.empty(len(x), dtype=int)
    for s in range(0, len(x), chunk):
        scores = x[s:s + chunk] @ pts.T - vals
        best[s:s + chunk] = np.argmax(scores, axis=1)
    idx = np.array(np.unravel_index(best, grid.shape)).T
    on_edge = np.any((idx == 0) | (idx == grid.m - 1), axis=1)
    quad = _quadratic_refine(phi.values, grid, idx, x)

    axes, h = grid.axes, grid.h
    lo, hi = grid.lower, grid.upper
    r = np.stack([axes[k][idx[:, k]] for k in range(n)], axis=1)
    if n == 1:
        spl = CubicSpline(axes[0], phi.values)
        for _ in range(8):
            g = spl(r[:, 0], 1) - x[:, 0]
            H = spl(r[:, 0], 2)
            d = np.clip(g / np.where(H > 0, H, np.inf), -h, h)
            r[:, 0] = np.clip(r[:, 0] - d, lo[0], hi[0])
        u = x[:, 0] * r[:, 0] - spl(r[:, 0])
    elif n == 2:
        spl = RectBivariateSpline(axes[0], axes[1], phi.values, kx=3, ky=3, s=0)
        for _ in range(8):
            a, b = r[:, 0], r[:, 1]
            g = np.stack([spl.ev(a, b, dx=1), spl.ev(a, b, dy=1)], axis=1) - x
            hxx, hxy, hyy = spl.ev(a, b, dx=2), spl.ev(a, b, dx=1, dy=1), spl.ev(a, b, dy=2)
            det = hxx * hyy - hxy ** 2
            ok = (det > 0) & (hxx > 0)
            det = np.where(ok, det, np.inf)
            d = np.stack([(hyy * g[:, 0] - hxy * g[:, 1]) / det, (hxx * g[:, 1] - hxy * g[:, 0]) / det], axis=1)
            r = np.clip(r - np.clip(d, -h, h), lo, hi)
        u = np.einsum("ka,ka->k", x, r) - spl.ev(r[:, 0], r[:, 1])
    else:
        u = quad
    err = np.where(on_edge, np.inf, np.abs(u - quad))
    return ConjugateSamples(x, u, err)


def _quadratic_refine(values, grid, idx, x):
    """Maximize ``x . rho - q(rho)`` for the central-difference quadratic ``q``."""
    n, h = grid.n, grid.h
    idx = np.clip(idx, 1, grid.m - 2)
    grad, hess = central_differences(values, h, reflect=False)
    key = tuple(idx.T)
    g, H, f0 = grad[key], hess[key], values[key]
    delta = np.linalg.solve(H, (x - g)[..., None])[..., 0]
    delta = np.clip(delta, -h, h)
    r = np.stack([grid.axes[k][idx[:, k]] for k in range(n)], axis=1) + delta
    model = f0 + np.einsum("ka,ka->k", g, delta) + 0.5 * np.einsum("ka,kab,kb->k", delta, H, delta)
    return np.einsum("ka,ka->k", x, r) - model


@dataclass(frozen=True)
class MomentImageReport:
    min_facet_value: float  # min over interior nodes and facets of l_j(grad phi)
    outside: float          # largest distance of a gradient sample outside P
    uncovered: float        # largest distance of a vertex of P from the image hull
    gap: float              # Hausdorff distance between the image hull and P

    def to_dict(self):
        return {k: float(v) for k, v in vars(self).items()}


def moment_map_image(phi, polytope, mask=None):
    """Compare the discrete gradient image of ``phi`` with the polytope.

    ``mask`` restricts the nodes used; by default all but the outer layer.
    """
    grad, _ = phi.derivatives()
    if mask is None:
        mask = phi.grid.interior_mask(1)
    y = grad[mask].reshape(-1, phi.n)
    y = y[np.all(np.isfinite(y), axis=1)]
    l = polytope.values(y)
    norms = np.linalg.norm(polytope.normal_array, axis=1)
    outside = float(max(0.0, np.max(-l / norms)))
    verts = polytope.vertex_array()
    if phi.n == 1:
        lo, hi = y.min(), y.max()
        uncovered = float(max(np.max(np.maximum(lo - verts[:, 0], 0)), np.max(np.maximum(verts[:, 0] - hi, 0))))
    else:
        try:
            hull = y[ConvexHull(y).vertices]
        except QhullError:
            hull = y
        uncovered = max(_distance_to_hull(p, hull) for p in verts)
    return MomentImageReport(float(l.min()), outside, float(uncovered), float(max(outside, uncovered)))


def _distance_to_hull(p, pts):
    """Euclidean distance from ``p`` to the convex hull of ``pts`` (NNLS)."""
    weight = 1e3 * (1.0 + np.abs(pts).max())
    A = np.vstack([pts.T, weight * np.ones(len(pts))])
    b = np.concatenate([p, [weight]])
    lam, _ = nnls(A, b, maxiter=50 * len(pts))
    return float(np.linalg.norm(pts.T @ lam - p))
