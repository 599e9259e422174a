"""Command line front end.

Every subcommand prints its result as JSON on stdout. With ``--out DIR``
the result, any potential files and a ``manifest.json`` (inputs with their
hashes, versions, tolerances, thread setting, wall time) are written there.

Exit status: 0 success, 2 invalid input, 3 an iteration did not converge,
4 input/output failure. Failures print a JSON object on stderr.

The thread count is read from ``TORICCONE_THREADS`` only; it is applied to
the BLAS/OpenMP pools before numpy is imported.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
THREAD_ENV = "TORICCONE_THREADS"
FORMATS = ("json", "csv", "binary")
SUBCOMMANDS = ("check", "invariants", "soliton", "solve", "oracle", "path", "moments")

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(Exception):
    """A command line value failed validation; ``field`` names it."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

    def to_dict(self):
        return {"error": "ConfigError", "field": self.field, "message": str(self)}


@dataclass
class RunConfig:
    subcommand: str
    inputs: list
    out: Path | None = None
    formats: tuple = ("json",)
    alpha: float | None = None
    tau: list | None = None
    R: float | None = None
    m: int | None = None
    tol: float | None = None
    options: dict = field(default_factory=dict)

    def tolerances(self):
        return {k: v for k, v in self.options.items() if k.endswith("tol")}


# -- parsing -------------------------------------------------------------------

def _floats(text, name):
    try:
        vals = [float(a) for a in str(text).split(",") if a.strip()]
    except ValueError:
        raise ConfigError(name, f"expected comma separated numbers, got {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ConfigError(name, f"expected finite numbers, got {text!r}")
    return vals


def _grid(text):
    parts = [a.strip() for a in str(text).split(",")]
    if len(parts) != 2:
        raise ConfigError("grid", "expected R,m (either may be empty for its default)")
    R = m = None
    if parts[0]:
        R = _floats(parts[0], "grid")[0]
        if not R > 0:
            raise ConfigError("grid", f"half width must be positive, got {R}")
    if parts[1]:
        try:
            m = int(parts[1])
        except ValueError:
            raise ConfigError("grid", f"points per axis must be an integer, got {parts[1]!r}") from None
        if m < 9:
            raise ConfigError("grid", f"need at least 9 points per axis, got {m}")
    return R, m


def build_parser():
    p = argparse.ArgumentParser(prog="toriccone", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", help="output directory for result files and manifest.json")
    common.add_argument("--format", default="json",
                        help="comma separated subset of json,csv,binary for potential files (default json)")
    sub = p.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("check", parents=[common], help="validate a polytope and report the Delzant condition")
    s.add_argument("polytope")

    s = sub.add_parser("invariants", parents=[common], help="Ricci bound R, invariant S and related data")
    s.add_argument("polytope")

    s = sub.add_parser("soliton", parents=[common], help="soliton field c for a center tau")
    s.add_argument("polytope")
    s.add_argument("--tau", required=True, help="center, comma separated")
    s.add_argument("--alpha", type=float, default=1.0, help="Einstein constant for the cone angles (default 1)")
    s.add_argument("--tol", type=float, default=1e-12)

    s = sub.add_parser("moments", parents=[common], help="exponential moments int_P exp(c.x) x^k dx")
    s.add_argument("polytope")
    s.add_argument("--c", required=True, help="vector c, comma separated")
    s.add_argument("--order", type=int, default=2, choices=(0, 1, 2))
    s.add_argument("--method", default="auto", choices=("auto", "quadrature", "divided"))

    for name, text in (("solve", "solve the Monge-Ampere equation by the continuity method"),
                       ("oracle", "one dimensional spectral oracle and comparison with the solver")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("polytope")
        s.add_argument("--alpha", type=float, required=True)
        s.add_argument("--tau", help="center, comma separated (default: barycenter)")
        s.add_argument("--grid", help="R,m; either may be empty for its default")
        s.add_argument("--tol", type=float, help="Newton tolerance on the residual")
        s.add_argument("--steps", type=int, default=8, help="initial number of continuity steps")
        s.add_argument("--order", type=int, default=4, choices=(2, 4), help="order of the differences")
        if name == "oracle":
            s.add_argument("--nodes", type=int, default=64, help="Chebyshev degree of the oracle")

    s = sub.add_parser("path", parents=[common], help="metrics along a blow-up family")
    s.add_argument("family")
    s.add_argument("--alpha", type=float, help="constant alpha (default 0.9 min R over the segment ends)")
    s.add_argument("--grid", help="R,m; R is ignored, every solve uses its own truncation box")
    s.add_argument("--tol", type=float)
    s.add_argument("--no-gh", action="store_true", help="skip the graph distance proxy")
    s.add_argument("--samples", type=int, default=64, help="sample points for the distance proxy")
    return p


def make_config(args):
    formats = tuple(a.strip() for a in args.format.split(",") if a.strip())
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise ConfigError("format", f"unknown output formats {bad or formats}; choose from {', '.join(FORMATS)}")
    inputs = [getattr(args, "polytope", None) or getattr(args, "family")]
    cfg = RunConfig(args.subcommand, inputs, Path(args.out) if args.out else None, formats)
    if getattr(args, "alpha", None) is not None:
        if not (math.isfinite(args.alpha) and args.alpha > 0):
            raise ConfigError("alpha", f"must be a positive number, got {args.alpha}")
        cfg.alpha = args.alpha
    if getattr(args, "tau", None):
        cfg.tau = _floats(args.tau, "tau")
    if getattr(args, "grid", None):
        cfg.R, cfg.m = _grid(args.grid)
    if getattr(args, "tol", None) is not None:
        if not args.tol > 0:
            raise ConfigError("tol", f"must be positive, got {args.tol}")
        cfg.tol = args.tol
    for key in ("c", "order", "method", "steps", "nodes", "no_gh", "samples"):
        if hasattr(args, key):
            cfg.options[key] = getattr(args, key)
    if "c" in cfg.options:
        cfg.options["c"] = _floats(cfg.options["c"], "c")
    for key, low in (("steps", 1), ("nodes", 8), ("samples", 4)):
        if key in cfg.options and cfg.options[key] < low:
            raise ConfigError(key, f"must be at least {low}, got {cfg.options[key]}")
    return cfg


# -- input files ------------------------------------------------------------------

def _read(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def _load_polytope(path):
    from .polytope import load_polytope

    return load_polytope(path)


def load_family(path):
    """Family file: ``base`` (path relative to this file, or inline table),
    ``lambda_a``, ``center`` (1-based facet numbers of the base), optional
    ``normal`` and ``t_grid``. ``[[segments]]`` holds several such tables,
    solved in order."""
    from .errors import ValidationError
    from .family import BlowupFamily
    from .polytope import parse_polytope

    path = Path(path)
    try:
        data = _read(path)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ValidationError(f"cannot parse {path}: {err}") from err
    tables = data.get("segments", [data])
    out = []
    for k, seg in enumerate(tables):
        try:
            base = seg["base"]
            P = _load_polytope(path.parent / base) if isinstance(base, str) else parse_polytope(base)
            center = [int(j) - 1 for j in seg["center"]]
            kw = {}
            if "t_grid" in seg:
                kw["t_grid"] = tuple(seg["t_grid"])
            if "normal" in seg:
                kw["normal"] = tuple(seg["normal"])
            out.append(BlowupFamily(P, tuple(seg["lambda_a"]), tuple(center), **kw))
        except KeyError as err:
            raise ValidationError(f"segment {k + 1} is missing the field {err}") from err
    return out, data.get("alpha")


# -- output -------------------------------------------------------------------

class _Emitter:
    def __init__(self, cfg):
        self.cfg = cfg
        self.files = []
        if cfg.out is not None:
            cfg.out.mkdir(parents=True, exist_ok=True)

    def potential(self, phi, stem):
        if self.cfg.out is None:
            return
        for fmt in self.cfg.formats:
            if fmt == "csv":
                target = self.cfg.out / f"{stem}.csv"
                phi.to_csv(target)
            elif fmt == "binary":
                target = self.cfg.out / f"{stem}.bin"
                phi.to_binary(target)
            else:
                continue
            self.files.append(target.name)

    def result(self, data):
        text = json.dumps(data, indent=2, default=_default)
        if self.cfg.out is not None:
            target = self.cfg.out / f"{self.cfg.subcommand}.json"
            target.write_text(text + "\n")
            self.files.append(target.name)
        return text


def _default(v):
    import numpy as np
    from fractions import Fraction

    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg, argv, files, wall_time):
    import numpy
    import scipy

    from . import __version__

    inputs = {str(p): _sha256(p) for p in cfg.inputs if p and Path(p).is_file()}
    manifest = {"subcommand": cfg.subcommand, "argv": list(argv), "inputs": inputs,
                "outputs": files,
                "versions": {"toriccone": __version__, "numpy": numpy.__version__,
                             "scipy": scipy.__version__, "python": platform.python_version()},
                "tolerances": cfg.tolerances(),
                "overrides": {"alpha": cfg.alpha, "tau": cfg.tau, "R": cfg.R, "m": cfg.m},
                "threads": os.environ.get(THREAD_ENV), "seed": None,
                "wall_time": wall_time}
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# -- subcommands ------------------------------------------------------------------

def _tau(cfg, P):
    import numpy as np

    from .errors import TauOutsidePolytope

    if cfg.tau is None:
        return None
    if len(cfg.tau) != P.n:
        raise ConfigError("tau", f"needs {P.n} coordinates, got {len(cfg.tau)}")
    tau = np.array(cfg.tau)
    if np.any(P.values(tau) <= 0):
        raise TauOutsidePolytope(f"tau={cfg.tau} is not in the open polytope")
    return tau


def run_check(cfg, out):
    from .polytope import is_delzant

    P = _load_polytope(cfg.inputs[0])
    rep = is_delzant(P)
    return {**rep.to_dict(), "dimension": P.n, "facets": P.N,
            "vertices": [[str(a) for a in v] for v in P.vertex_fan.points()],
            "volume": str(P.volume), "barycenter": [str(a) for a in P.barycenter]}


def run_invariants(cfg, out):
    from .invariants import cone_angles, greatest_ricci_lower_bound, s_invariant

    P = _load_polytope(cfg.inputs[0])
    R = greatest_ricci_lower_bound(P)
    S = s_invariant(P)
    bary = [float(a) for a in P.barycenter]
    return {"R": float(R), "R_exact": str(R), **S.to_dict(),
            "barycenter": bary, "barycenter_exact": [str(a) for a in P.barycenter],
            "cone_angles_at_R": cone_angles(P, float(R), bary).tolist()}


def run_soliton(cfg, out):
    from .invariants import cone_angles, soliton_residual, solve_soliton_field

    P = _load_polytope(cfg.inputs[0])
    tau = _tau(cfg, P)
    cfg.options["soliton_tol"] = cfg.tol
    c = solve_soliton_field(P, tau, tol=cfg.tol)
    return {"tau": tau.tolist(), "c": c.tolist(), "residual": soliton_residual(P, c, tau),
            "alpha": cfg.alpha, "beta": cone_angles(P, cfg.alpha, tau).tolist()}


def run_moments(cfg, out):
    from .moments import exp_moments

    P = _load_polytope(cfg.inputs[0])
    c = cfg.options["c"]
    if len(c) != P.n:
        raise ConfigError("c", f"needs {P.n} coordinates, got {len(c)}")
    m = exp_moments(P, c, cfg.options["order"], method=cfg.options["method"])
    res = {"c": c, "value": m.value}
    if m.first is not None:
        res["first"] = m.first.tolist()
        res["mean"] = (m.first / m.value).tolist()
    if m.second is not None:
        res["second"] = m.second.tolist()
    return res


def _problem(cfg, P):
    from .ma_solver import setup_problem

    return setup_problem(P, cfg.alpha, _tau(cfg, P), grid=(cfg.R, cfg.m), order=cfg.options["order"])


def run_solve(cfg, out):
    from .ma_solver import SolveConfig, solve_continuity

    P = _load_polytope(cfg.inputs[0])
    problem = _problem(cfg, P)
    sc = SolveConfig(tol=cfg.tol, steps=cfg.options["steps"])
    cfg.options["newton_tol"] = sc.resolved_tol(P.n)
    rep = solve_continuity(problem, sc)
    out.potential(rep.phi, "potential")
    return rep.to_dict()


def run_oracle(cfg, out):
    from .ma_solver import SolveConfig, compare_with_oracle, ode_oracle_1d, solve_continuity

    P = _load_polytope(cfg.inputs[0])
    if P.n != 1:
        raise ConfigError("polytope", f"the oracle needs an interval, got dimension {P.n}")
    problem = _problem(cfg, P)
    orc = ode_oracle_1d(problem, N=cfg.options["nodes"])
    sc = SolveConfig(tol=cfg.tol, steps=cfg.options["steps"])
    cfg.options["newton_tol"] = sc.resolved_tol(P.n)
    cfg.options["oracle_tol"] = 1e-10
    rep = solve_continuity(problem, sc)
    out.potential(rep.phi, "potential")
    cmp = compare_with_oracle(rep, orc)
    return {"solve": rep.to_dict(),
            "oracle": {"nodes": orc.nodes.tolist(), "f": orc.f.tolist(), "iterations": orc.iterations,
                       "residual": orc.residual, "gauge": orc.gauge},
            "comparison": cmp}


def run_path(cfg, out):
    from .family import solve_path
    from .ma_solver import SolveConfig

    families, file_alpha = load_family(cfg.inputs[0])
    cfg.options["newton_tol"] = SolveConfig(tol=cfg.tol).resolved_tol(families[0].n)
    alpha = cfg.alpha if cfg.alpha is not None else file_alpha
    segments = []
    for k, fam in enumerate(families):
        rep = solve_path(fam, alpha, m=cfg.m, config=SolveConfig(tol=cfg.tol),
                         gh=not cfg.options["no_gh"], gh_samples=cfg.options["samples"])
        for s in rep.steps + [rep.limit]:
            out.potential(s.report.phi, f"potential_seg{k + 1}_t{str(s.t).replace('/', '_')}")
        segments.append(rep.to_dict())
    return {"segments": segments}


RUNNERS = {"check": run_check, "invariants": run_invariants, "soliton": run_soliton,
           "moments": run_moments, "solve": run_solve, "oracle": run_oracle, "path": run_path}


def _apply_threads():
    value = os.environ.get(THREAD_ENV)
    if not value:
        return
    if not value.isdigit() or int(value) < 1:
        raise ConfigError(THREAD_ENV, f"must be a positive integer, got {value!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = value


def run(cfg, argv=()):
    """Dispatch one configured run; returns the JSON text of the result."""
    t0 = time.perf_counter()
    out = _Emitter(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = RUNNERS[cfg.subcommand](cfg, out)
    if caught:
        result["warnings"] = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    text = out.result(result)
    if cfg.out is not None:
        write_manifest(cfg, argv, out.files, time.perf_counter() - t0)
    return text


def _fail(code, payload):
    sys.stderr.write(json.dumps(payload, default=str) + "\n")
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        _apply_threads()
        from .errors import ConvergenceError, ValidationError

        cfg = make_config(args)
        text = run(cfg, argv)
    except ConfigError as err:
        return _fail(EXIT_INVALID, err.to_dict())
    except ValidationError as err:
        return _fail(EXIT_INVALID, err.to_dict())
    except ConvergenceError as err:
        return _fail(EXIT_SOLVER, err.to_dict())
    except OSError as err:
        return _fail(EXIT_IO, {"error": type(err).__name__, "message": str(err),
                               "path": getattr(err, "filename", None)})
    sys.stdout.write(text + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
