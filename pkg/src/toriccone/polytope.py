"""Exact rational polytopes in half-space form.

A polytope is stored as ``P = {x : l_j(x) = v_j . x + lambda_j >= 0}`` with
integer (primitive) normals ``v_j`` and rational offsets ``lambda_j``. All
combinatorial data (vertices, triangulation, volume, barycenter) is computed
with :class:`fractions.Fraction`, so Delzant checks and identities between
offsets are exact.

Vertex enumeration is brute force over the ``C(N, n)`` subsets of facets,
which is fine for the small polytopes this package targets (``N`` up to about
20 in dimension 2 or 3).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from itertools import combinations
from pathlib import Path

import numpy as np

from . import _exact as ex
from .errors import (DimensionMismatch, EmptyInterior, NonIntegralNormals,
                     NonPrimitiveNormal, RedundantFacet, Unbounded,
                     ValidationError)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class Vertex:
    point: tuple
    active: tuple  # sorted facet indices with l_j(point) == 0


@dataclass(frozen=True)
class VertexFan:
    vertices: tuple

    def __len__(self):
        return len(self.vertices)

    def points(self):
        return [v.point for v in self.vertices]


@dataclass(frozen=True)
class DelzantReport:
    is_delzant: bool
    failures: tuple  # (vertex index, reason)

    def to_dict(self):
        return {"is_delzant": self.is_delzant,
                "failures": [{"vertex": i, "reason": r} for i, r in self.failures]}


class Polytope:
    """Validated polytope ``{x : v_j . x + lambda_j >= 0}``.

    Parameters
    ----------
    normals : sequence of integer vectors
    offsets : sequence of rationals (ints, Fractions or ``"p/q"`` strings)
    name : optional label carried through serialization
    raw : accept non-primitive or rational normals
    real_offsets : accept float offsets (converted to the rational with the
        same shortest decimal representation)
    """

    def __init__(self, normals, offsets, *, name=None, raw=False, real_offsets=False):
        normals = [list(v) for v in normals]
        offsets = list(offsets)
        if len(normals) != len(offsets):
            raise DimensionMismatch("normals and offsets differ in length")
        if not normals:
            raise DimensionMismatch("no facets given")
        n = len(normals[0])
        if n < 1 or any(len(v) != n for v in normals):
            raise DimensionMismatch("normals must all have the same positive length")
        if len(normals) < n + 1:
            raise Unbounded(f"{len(normals)} facets cannot bound a region in dimension {n}")

        self.n = n
        self.raw = bool(raw)
        self.real_offsets = bool(real_offsets)
        self.name = name
        self.normals = tuple(tuple(_normal_entry(a, j, raw) for a in v) for j, v in enumerate(normals))
        self.offsets = tuple(_offset(b, j, real_offsets) for j, b in enumerate(offsets))
        for j, v in enumerate(self.normals):
            if all(a == 0 for a in v):
                raise ValidationError(f"normal of facet {j} is zero")
            if not raw and _content(v) != 1:
                raise NonPrimitiveNormal(j, [int(a) for a in v])
        self._validate()

    # -- construction helpers -------------------------------------------

    @property
    def N(self):
        return len(self.normals)

    def _validate(self):
        n = self.n
        if ex.rank(self.normals) < n:
            raise Unbounded("normals do not span; the region contains a line")
        fan = self._enumerate_vertices()
        if not fan:
            raise EmptyInterior("the inequalities have no common solution")
        for sub in combinations(range(self.N), n - 1):
            d = ex.kernel_vector([self.normals[j] for j in sub], n)
            if all(a == 0 for a in d):
                continue
            for sgn in (1, -1):
                if all(ex.dot(v, d) * sgn >= 0 for v in self.normals):
                    raise Unbounded("recession cone is nontrivial")
        touching = [sum(j in v.active for v in fan) for j in range(self.N)]
        for j, k in enumerate(touching):
            if k == len(fan):
                raise EmptyInterior(f"facet {j} vanishes on the whole region")
        for j, k in enumerate(touching):
            if k == 0:
                raise RedundantFacet(j)
        self.vertex_fan = VertexFan(tuple(fan))

    def _enumerate_vertices(self):
        n = self.n
        found = {}
        for sub in combinations(range(self.N), n):
            x = ex.solve([self.normals[j] for j in sub], [-self.offsets[j] for j in sub])
            if x is None:
                continue
            key = tuple(x)
            if key in found:
                continue
            vals = self.evaluate_exact(key)
            if all(val >= 0 for val in vals):
                found[key] = Vertex(key, tuple(j for j, val in enumerate(vals) if val == 0))
        return sorted(found.values(), key=lambda v: v.point)

    # -- evaluation -----------------------------------------------------

    def evaluate_exact(self, x):
        x = [ex.as_fraction(a) for a in x]
        return tuple(ex.dot(v, x) + b for v, b in zip(self.normals, self.offsets))

    @cached_property
    def normal_array(self):
        return np.array([[float(a) for a in v] for v in self.normals])

    @cached_property
    def offset_array(self):
        return np.array([float(b) for b in self.offsets])

    def values(self, x):
        """Float facet values; ``x`` may be a batch of shape ``(..., n)``."""
        x = np.asarray(x, dtype=float)
        return x @ self.normal_array.T + self.offset_array

    # -- derived geometry -----------------------------------------------

    @cached_property
    def simplices(self):
        """Exact star triangulation as a list of ``(points, volume)``."""
        verts = self.vertex_fan.vertices
        out = []
        for simplex in _star(verts, tuple(range(len(verts))), self.n):
            pts = [verts[i].point if isinstance(i, int) else i for i in simplex]
            vol = abs(ex.det([[a - b for a, b in zip(p, pts[0])] for p in pts[1:]])) / ex.factorial(self.n)
            if vol:
                out.append((tuple(pts), vol))
        return out

    @cached_property
    def volume(self):
        return sum((v for _, v in self.simplices), Fraction(0))

    @cached_property
    def barycenter(self):
        acc = [Fraction(0)] * self.n
        for pts, vol in self.simplices:
            for k in range(self.n):
                acc[k] += vol * sum(p[k] for p in pts) / (self.n + 1)
        return tuple(a / self.volume for a in acc)

    @cached_property
    def diameter(self):
        pts = np.array([[float(a) for a in v.point] for v in self.vertex_fan.vertices])
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def vertex_array(self):
        return np.array([[float(a) for a in v.point] for v in self.vertex_fan.vertices])

    def inradius_at(self, x):
        """Euclidean distance from ``x`` to the boundary."""
        norms = np.linalg.norm(self.normal_array, axis=1)
        return float(np.min(self.values(x) / norms))

    # -- transformations ------------------------------------------------

    def with_offsets(self, offsets, **kw):
        kw.setdefault("name", self.name)
        kw.setdefault("raw", self.raw)
        kw.setdefault("real_offsets", self.real_offsets)
        return Polytope(self.normals, offsets, **kw)

    def transformed(self, A, b=None):
        """Image under ``x -> A x + b`` for an integer matrix with det +-1."""
        n = self.n
        A = [[ex.as_fraction(a) for a in r] for r in A]
        b = [Fraction(0)] * n if b is None else [ex.as_fraction(a) for a in b]
        d = ex.det(A)
        if abs(d) != 1:
            raise ValidationError("transformation matrix must be unimodular")
        # columns of A^{-1}
        cols = [ex.solve(A, [Fraction(int(i == k)) for i in range(n)]) for k in range(n)]
        inv = [[cols[k][i] for k in range(n)] for i in range(n)]
        normals = [[ex.dot(v, [inv[i][k] for i in range(n)]) for k in range(n)] for v in self.normals]
        offsets = [lam - ex.dot(w, b) for w, lam in zip(normals, self.offsets)]
        return Polytope(normals, offsets, name=self.name, raw=self.raw, real_offsets=self.real_offsets)

    def translated(self, a):
        return self.transformed([[int(i == k) for k in range(self.n)] for i in range(self.n)], a)

    def dilated(self, k):
        k = ex.as_fraction(k)
        return self.with_offsets([k * b for b in self.offsets])

    # -- serialization --------------------------------------------------

    def to_dict(self):
        out = {"dimension": self.n,
               "facets": [{"normal": [_plain(a) for a in v], "offset": str(b)}
                          for v, b in zip(self.normals, self.offsets)]}
        if self.name is not None:
            out["name"] = self.name
        return out

    def __eq__(self, other):
        return (isinstance(other, Polytope) and self.normals == other.normals
                and self.offsets == other.offsets)

    def __hash__(self):
        return hash((self.normals, self.offsets))

    def __repr__(self):
        rows = ", ".join(f"{list(map(_plain, v))}:{b}" for v, b in zip(self.normals, self.offsets))
        return f"Polytope(n={self.n}, {rows})"


def _content(v):
    g = 0
    for a in v:
        g = math.gcd(g, int(a))
    return g


def _plain(a):
    return int(a) if a.denominator == 1 else str(a)


def _normal_entry(a, j, raw):
    q = ex.as_fraction(a)
    if q.denominator != 1 and not raw:
        raise NonIntegralNormals(f"normal of facet {j} has non-integer entry {q}")
    return q


def _offset(b, j, real_offsets):
    if isinstance(b, float) and not real_offsets:
        raise ValidationError(f"offset of facet {j} is a float; enable real offsets to accept it")
    try:
        return ex.as_fraction(b)
    except (ValueError, ZeroDivisionError, TypeError) as err:
        raise ValidationError(f"offset of facet {j} is not a rational number: {b!r}") from err


def _star(verts, face, dim):
    """Recursive star triangulation of the face spanned by ``verts[face]``.

    Yields tuples of length ``dim + 1`` whose entries are vertex indices or
    explicit apex points.
    """
    if dim == 0:
        yield (face[0],)
        return
    pts = [verts[i].point for i in face]
    apex = tuple(sum(c) / len(pts) for c in zip(*pts))
    facets = set()
    for j in set().union(*(verts[i].active for i in face)):
        sub = tuple(i for i in face if j in verts[i].active)
        if len(sub) < len(face) and sub not in facets:
            if ex.affine_dimension([verts[i].point for i in sub]) == dim - 1:
                facets.add(sub)
    for sub in sorted(facets):
        for simplex in _star(verts, sub, dim - 1):
            yield (apex,) + simplex


# -- module level API ------------------------------------------------------

def parse_polytope(doc, fmt=None, *, raw=False, real_offsets=False):
    """Build a polytope from a TOML/JSON string or an already parsed mapping."""
    if isinstance(doc, (str, bytes)):
        text = doc.decode() if isinstance(doc, bytes) else doc
        if fmt is None:
            fmt = "json" if text.lstrip().startswith("{") else "toml"
        try:
            data = json.loads(text) if fmt == "json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
            raise ValidationError(f"cannot parse polytope document: {err}") from err
    else:
        data = doc
    try:
        n = int(data["dimension"])
        facets = data["facets"]
        normals = [f["normal"] for f in facets]
        offsets = [f["offset"] for f in facets]
    except (KeyError, TypeError) as err:
        raise ValidationError(f"polytope document is missing a field: {err}") from err
    raw = bool(data.get("raw", raw))
    real_offsets = bool(data.get("real_offsets", real_offsets))
    if any(len(v) != n for v in normals):
        raise DimensionMismatch(f"normals must have length {n}")
    return Polytope(normals, offsets, name=data.get("name"), raw=raw, real_offsets=real_offsets)


def load_polytope(path, **kw):
    path = Path(path)
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    return parse_polytope(path.read_text(), fmt, **kw)


def dump_polytope(P, fmt="toml"):
    """Serialize so that :func:`parse_polytope` reproduces the exact data."""
    d = P.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2)
    lines = []
    if P.name is not None:
        lines.append(f"name = {json.dumps(P.name)}")
    lines.append(f"dimension = {P.n}")
    for f in d["facets"]:
        normal = ", ".join(json.dumps(a) for a in f["normal"])
        lines += ["", "[[facets]]", f"normal = [{normal}]", f'offset = "{f["offset"]}"']
    return "\n".join(lines) + "\n"


def vertices(P):
    return P.vertex_fan


def is_delzant(P):
    """Check simplicity and unimodularity at every vertex."""
    for j, v in enumerate(P.normals):
        if any(a.denominator != 1 for a in v):
            raise NonIntegralNormals(f"normal of facet {j} is not integral")
    failures = []
    for i, vert in enumerate(P.vertex_fan.vertices):
        if len(vert.active) != P.n:
            failures.append((i, "non-simple"))
            continue
        if any(_content(P.normals[j]) != 1 for j in vert.active):
            failures.append((i, "non-primitive"))
            continue
        if abs(ex.det([P.normals[j] for j in vert.active])) != 1:
            failures.append((i, "non-unimodular"))
    return DelzantReport(not failures, tuple(failures))


def volume(P):
    return P.volume


def barycenter(P):
    return P.barycenter


def facet_values(P, x):
    """Facet values ``(l_1(x), ..., l_N(x))``.

    Exact Fractions are returned when every coordinate of ``x`` is an int or
    Fraction; otherwise a float array.
    """
    if len(x) != P.n:
        raise DimensionMismatch(f"point has length {len(x)}, expected {P.n}")
    if all(isinstance(a, (int, Fraction)) and not isinstance(a, bool) for a in x):
        return P.evaluate_exact(x)
    return P.values(np.asarray(x, dtype=float))


# -- a few standard polytopes used by tests and the CLI -------------------

def simplex(n, scale=1):
    """Simplex ``{x_i + 1 >= 0, scale - sum(x) >= 0}``; scale 1 is anticanonical."""
    normals = [[int(i == k) for k in range(n)] for i in range(n)] + [[-1] * n]
    return Polytope(normals, [1] * n + [scale], name=f"simplex{n}")


def cube(n, lo=-1, hi=1):
    normals, offsets = [], []
    for i in range(n):
        e = [int(i == k) for k in range(n)]
        normals += [e, [-a for a in e]]
        offsets += [-ex.as_fraction(lo), ex.as_fraction(hi)]
    return Polytope(normals, offsets, name=f"cube{n}")


def interval(a=-1, b=1):
    return Polytope([[1], [-1]], [-ex.as_fraction(a), ex.as_fraction(b)], name="interval")


def example_eps_polytope(eps):
    """Plane blown up at a point, polarized by ``eps`` in (0, 2).

    Facets in order: ``x+y+eps``, ``y+1``, ``x+1``, ``-x-y+eps``.
    """
    e = ex.as_fraction(eps)
    return Polytope([[1, 1], [0, 1], [1, 0], [-1, -1]], [e, 1, 1, e], name=f"eps={e}")
