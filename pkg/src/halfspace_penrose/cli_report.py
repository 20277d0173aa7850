"""Command-line front end: mass sweeps, the doubling pipeline and the perturbation check.

Every run writes CSV tables and one ``summary.txt`` record of ``key: value``
lines into the output directory.  The record starts with the command, the
configuration hash and the convention block; floats are written with
``repr`` so identical configurations give byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .doubling_glue import MollifierSpec, assemble_smoothed_double
from .elliptic_solver import conformal_repair, make_curvature_bump
from .mass_quadrature import adm_mass, default_nodes, halfspace_mass, sphere_rule
from .metric_core import (
    BoundaryShapeModel,
    DomainSpec,
    harmonic_profile,
    make_conformally_flat,
    make_schwarzschild,
    make_schwarzschild_halfspace,
    radial_factor,
)
from .penrose_verify import CONVENTIONS, NoHorizonError, find_horizon_radial, horizon_area, penrose_ratio
from .perturbations import PerturbationError, find_witness, make_positive_bump

__all__ = ["ConfigError", "RunConfig", "load_config", "config_hash", "cmd_mass", "cmd_pipeline",
           "cmd_perturb_check", "build_model", "main"]

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3

COMMANDS = ("mass", "pipeline", "perturb-check")
MODELS = ("flat", "flat-halfspace", "schwarzschild", "schwarzschild-halfspace", "curvature-bump-halfspace",
          "positive-bump-halfspace")


class ConfigError(ValueError):
    """Unusable configuration (exit code 2)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    command: str
    out: str = "out"
    threads: int = 1
    model: str = "schwarzschild-halfspace"
    dim: int = 3
    mass: float = 1.0
    amplitude: float = 0.0
    support: tuple = (2.0, 3.0)
    lambdas: tuple = (20.0, 40.0, 80.0)
    nodes: Optional[int] = None
    tol: Optional[float] = None
    deltas: tuple = (0.1,)
    outer_radius: float = 1000.0
    grid: int = 321
    angular: int = 48
    h0: tuple = (1.0, -1.0)
    eps: float = 0.1
    k_values: tuple = tuple(2.0**j for j in range(1, 11))

    def hashed_fields(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d


def _floats(text: str, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise ConfigError(f"{what}: empty list")
    return vals


_DEFAULT_DELTAS = {"pipeline": (0.1,), "perturb-check": (0.02, 5e-3, 1e-3, 2e-4, 5e-5, 1e-5), "mass": (0.1,)}

_KEYS = {
    "run": {"command", "out", "threads", "tol"},
    "metric": {"model", "dim", "mass", "amplitude", "support"},
    "mass": {"lambdas", "nodes"},
    "pipeline": {"deltas", "outer_radius", "grid", "angular"},
    "perturb": {"h0", "eps", "deltas", "k_values", "grid"},
}


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read an INI file and apply flag overrides (flags win)."""
    cp = configparser.ConfigParser()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for sec in cp.sections():
        if sec not in _KEYS:
            raise ConfigError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - _KEYS[sec]
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {', '.join(sorted(extra))}")
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}

    def get(sec, key, default=None):
        return cp.get(sec, key, fallback=default) if cp.has_section(sec) else default

    command = ov.get("command") or get("run", "command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {', '.join(COMMANDS)}; got {command!r}")
    cfg = RunConfig(command=command)
    try:
        cfg.out = str(ov.get("out") or get("run", "out", "out"))
        cfg.threads = int(ov.get("threads") or get("run", "threads", 1))
        tol = ov.get("tol", get("run", "tol"))
        cfg.tol = None if tol is None else float(tol)
        cfg.model = get("metric", "model", cfg.model)
        cfg.dim = int(get("metric", "dim", cfg.dim))
        cfg.mass = float(get("metric", "mass", cfg.mass))
        cfg.amplitude = float(get("metric", "amplitude", cfg.amplitude))
        sup = get("metric", "support")
        if sup is not None:
            cfg.support = _floats(sup, "support")
        lam = ov.get("lambda") or get("mass", "lambdas")
        if lam is not None:
            cfg.lambdas = _floats(lam, "lambda")
        nodes = get("mass", "nodes")
        cfg.nodes = None if nodes is None else int(nodes)
        sec = "perturb" if command == "perturb-check" else "pipeline"
        dl = ov.get("delta") or get(sec, "deltas")
        cfg.deltas = _floats(dl, "delta") if dl is not None else _DEFAULT_DELTAS[command]
        cfg.outer_radius = float(get("pipeline", "outer_radius", cfg.outer_radius))
        cfg.angular = int(get("pipeline", "angular", cfg.angular))
        grid = ov.get("grid") or get(sec, "grid")
        if grid is not None:
            cfg.grid = int(grid)
        elif command == "perturb-check":
            cfg.grid = 36
        h0 = get("perturb", "h0")
        if h0 is not None:
            cfg.h0 = _floats(h0, "h0")
        cfg.eps = float(get("perturb", "eps", cfg.eps))
        kv = get("perturb", "k_values")
        if kv is not None:
            cfg.k_values = _floats(kv, "k_values")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {', '.join(MODELS)}; got {cfg.model!r}")
    if not 3 <= cfg.dim <= 7 and cfg.command != "perturb-check":
        raise ConfigError("dim must lie in 3..7")
    if cfg.threads < 1:
        raise ConfigError("threads must be positive")
    if cfg.tol is not None and not (cfg.tol > 0 and math.isfinite(cfg.tol)):
        raise ConfigError("tolerance must be positive")
    if any(not (l > 0) for l in cfg.lambdas) or list(cfg.lambdas) != sorted(set(cfg.lambdas)):
        raise ConfigError("lambda list must be positive and strictly increasing")
    if any(not (d > 0) for d in cfg.deltas):
        raise ConfigError("delta values must be positive")
    if cfg.grid < 4 or cfg.angular < 4:
        raise ConfigError("grid sizes must be at least 4")
    if cfg.mass < 0:
        raise ConfigError("mass must be nonnegative")
    if len(cfg.support) != 2 or not cfg.support[0] < cfg.support[1]:
        raise ConfigError("support must be two increasing radii")
    if cfg.command == "pipeline" and cfg.model not in ("flat-halfspace", "schwarzschild-halfspace",
                                                       "curvature-bump-halfspace", "positive-bump-halfspace"):
        raise ConfigError("pipeline needs a half-space model")


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.hashed_fields(), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(cfg: RunConfig):
    """Metric named by ``cfg.model`` together with its expected mass (``None`` if unknown)."""
    n = cfg.dim
    if cfg.model in ("flat", "flat-halfspace"):
        kind = "half-space-annulus" if cfg.model.endswith("halfspace") else "full-space-annulus"
        u = radial_factor(n, harmonic_profile(n, 0.0))
        return make_conformally_flat(n, DomainSpec(kind, 1.0), u, name=cfg.model, decay_rate=float(n - 2)), 0.0
    if cfg.mass <= 0:
        raise ConfigError(f"model {cfg.model} needs a positive mass")
    if cfg.model == "schwarzschild":
        return make_schwarzschild(n, cfg.mass), cfg.mass
    if cfg.model == "schwarzschild-halfspace":
        return make_schwarzschild_halfspace(n, cfg.mass), cfg.mass
    if cfg.model == "curvature-bump-halfspace":
        full = make_curvature_bump(n, 2.0 * cfg.mass, cfg.amplitude, support=cfg.support)
        dom = DomainSpec("half-space-annulus", full.horizon_radius)
        g = make_conformally_flat(n, dom, full.factor, name=cfg.model, decay_rate=float(n - 2))
        g.horizon_radius = full.horizon_radius
        return g, cfg.mass
    g = make_positive_bump(n, cfg.mass, cfg.amplitude, support=cfg.support)
    return g, float(g.mass)


def convention_block(cfg: RunConfig) -> list:
    nodes = cfg.nodes if cfg.nodes is not None else default_nodes(cfg.dim)
    lines = [
        ("convention.orientation", "unit normals point toward infinity; wall normal points out of x_n > 0"),
        ("convention.H_sign", CONVENTIONS["mean_curvature"]),
        ("convention.outermost", CONVENTIONS["outermost_policy"]),
        ("convention.omega", CONVENTIONS["omega"]),
        ("convention.quadrature", f"Gauss-Legendre/Gauss-Jacobi product rule, {nodes} nodes per angle"),
        ("convention.conformal_exponent", "4/(n-2)"),
    ]
    return lines


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _write_summary(cfg: RunConfig, out: Path, items: list, status: str) -> str:
    lines = [("command", cfg.command), ("config_hash", config_hash(cfg)), ("status", status)]
    lines += convention_block(cfg)
    lines += [("config." + k, v) for k, v in sorted(cfg.hashed_fields().items())]
    lines += items
    text = "".join(f"{k}: {_fmt(v)}\n" for k, v in lines)
    (out / "summary.txt").write_text(text)
    return text


def _csv(header: list, rows: list) -> str:
    return ",".join(header) + "\n" + "".join(",".join(_fmt(v) for v in row) + "\n" for row in rows)


def _mass_of(g, cfg: RunConfig):
    fn = halfspace_mass if g.domain.is_half_space else adm_mass
    return fn(g, lambdas=cfg.lambdas, nodes=cfg.nodes, threads=cfg.threads)


def cmd_mass(cfg: RunConfig) -> tuple:
    """Mass sweep over ``cfg.lambdas``; returns ``(written files, passed)``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    g, expected = build_model(cfg)
    est = _mass_of(g, cfg)
    tol = cfg.tol if cfg.tol is not None else 0.01
    m = est.extrapolated
    if expected is None:
        ok, err = True, None
    elif expected == 0:
        err = abs(m)
        ok = err < 1e-8
    else:
        err = abs(m - expected) / abs(expected)
        ok = err <= tol
    (out / "mass_sweep.csv").write_text(est.to_csv())
    items = [("mass.kind", est.kind), ("mass.value", m), ("mass.expected", expected), ("mass.error", err),
             ("mass.tolerance", tol), ("mass.fit_exponent", est.fit_exponent),
             ("mass.fit_residual", est.residual)]
    _write_summary(cfg, out, items, "pass" if ok else "fail")
    return [out / "mass_sweep.csv", out / "summary.txt"], ok


def _sphere_area(u, dim, radius, nodes=None) -> float:
    rule = sphere_rule(dim, "sphere", nodes)
    vals = u(radius * rule.points) ** (2.0 * (dim - 1) / (dim - 2))
    return float(np.dot(rule.weights, vals)) * radius ** (dim - 1)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, exc) from exc


PIPELINE_HEADER = ["delta", "mass_half", "area_half", "mass_double", "repair_mass_change", "mass_tilde",
                   "mass_tilde_direct", "area_tilde", "mass_drift", "area_drift", "min_R_double",
                   "min_R_repaired", "ratio_half", "ratio_closed"]


def _relative(a, b):
    return abs(a - b) / abs(b) if b != 0 else abs(a - b)


def cmd_pipeline(cfg: RunConfig) -> tuple:
    """Half-space data -> mirror double -> seam smoothing -> conformal repair -> horizon and mass."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.dim
    g, _ = _stage("model", build_model, cfg)
    m_half = _stage("half-space mass", _mass_of, g, cfg).extrapolated
    try:
        hz = find_horizon_radial(g.factor, n)
        r_h = hz.radius
        area_half = horizon_area(g.factor, n, r_h, "hemisphere")
    except NoHorizonError:
        r_h, area_half = None, None
    ratio_half = penrose_ratio(m_half, area_half, n, "half-space").ratio if area_half else None
    r_in = r_h if r_h is not None else g.domain.inner_radius
    tol = cfg.tol if cfg.tol is not None else 0.02
    rows = []
    ok = True
    for d in cfg.deltas:
        sd = _stage("double", assemble_smoothed_double, g, MollifierSpec(d))
        dom = DomainSpec("full-space-annulus", r_in)
        gd = make_conformally_flat(n, dom, sd.factor, name="smoothed-double", decay_rate=g.decay_rate)
        m_double = _stage("double mass", adm_mass, gd, cfg.lambdas, cfg.nodes, cfg.threads).extrapolated
        rep = _stage("repair", conformal_repair, gd, inner_radius=r_in, outer_radius=cfg.outer_radius,
                     reduction="axisymmetric", radial_points=cfg.grid, angular_points=cfg.angular)
        m_tilde = m_double + rep.mass_change
        m_direct = _stage("repaired mass", adm_mass, rep.repaired, cfg.lambdas, cfg.nodes, cfg.threads).extrapolated
        area_tilde = _stage("horizon area", _sphere_area, rep.repaired.factor, n, r_in) if r_h else None
        mass_drift = _relative(m_tilde, 2 * m_half)
        area_drift = _relative(area_tilde, 2 * area_half) if r_h else 0.0
        ratio_closed = penrose_ratio(m_tilde, area_tilde, n, "closed").ratio if r_h else None
        rows.append([d, m_half, area_half, m_double, rep.mass_change, m_tilde, m_direct, area_tilde,
                     mass_drift, area_drift, rep.min_R_before, rep.min_R_after, ratio_half, ratio_closed])
        ok = ok and mass_drift < tol and area_drift < tol and rep.min_R_after >= -1e-8
    (out / "pipeline.csv").write_text(_csv(PIPELINE_HEADER, rows))
    last = dict(zip(PIPELINE_HEADER, rows[-1]))
    items = [("pipeline.horizon_radius", r_h), ("pipeline.tolerance", tol)]
    items += [("pipeline." + k, last[k]) for k in PIPELINE_HEADER]
    _write_summary(cfg, out, items, "pass" if ok else "fail")
    return [out / "pipeline.csv", out / "summary.txt"], ok


def cmd_perturb_check(cfg: RunConfig) -> tuple:
    """Amplitude scan for the boundary perturbation on a collar model with principal curvatures ``h0``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    h0 = np.diag(np.asarray(cfg.h0, float))
    if not np.any(h0):
        # totally geodesic boundary: the zero perturbation already works
        rows = [[k, 0.0, 1] for k in cfg.k_values]
        (out / "k_scan.csv").write_text(_csv(["K", "min_DR", "admissible"], rows))
        (out / "dr_grid.csv").write_text("DR\n0.0\n")
        items = [("perturb.trivial", "h0 = 0, DR identically 0"), ("perturb.witness_delta", None),
                 ("perturb.selected_K", None)]
        _write_summary(cfg, out, items, "pass")
        return [out / "k_scan.csv", out / "dr_grid.csv", out / "summary.txt"], True
    model = BoundaryShapeModel(h0, np.zeros_like(h0))
    rel = cfg.tol if cfg.tol is not None else 1e-8
    try:
        tried = find_witness(model, eps=cfg.eps, deltas=cfg.deltas, k_values=list(cfg.k_values),
                             radial=cfg.grid, rel_tol=rel)
    except PerturbationError as exc:
        raise ConfigError(f"invalid boundary data: {exc}") from exc
    if not tried:
        raise ConfigError("no collar depth below eps in the delta list")
    rows = []
    for d, rep in tried:
        rows += [[d, k, m, int(a)] for k, m, a in rep.scan_rows()]
    (out / "k_scan.csv").write_text(_csv(["delta", "K", "min_DR", "admissible"], rows))
    d_last, rep = tried[-1]
    (out / "dr_grid.csv").write_text(rep.grid_csv())
    ok = rep.selected_K is not None and rep.dr_center > 0
    items = [("perturb.witness_delta", d_last if ok else None), ("perturb.selected_K", rep.selected_K),
             ("perturb.dr_center", rep.dr_center), ("perturb.dr_scale", rep.dr_scale),
             ("perturb.mean_curvature_closed_form", rep.mean_curvature_closed_form),
             ("perturb.mean_curvature_fd", rep.mean_curvature_fd),
             ("perturb.area_closed_form", rep.area_closed_form), ("perturb.area_fd", rep.area_fd),
             ("perturb.fd_ratio", rep.fd_ratio)]
    _write_summary(cfg, out, items, "pass" if ok else "fail")
    return [out / "k_scan.csv", out / "dr_grid.csv", out / "summary.txt"], ok


_RUNNERS = {"mass": cmd_mass, "pipeline": cmd_pipeline, "perturb-check": cmd_perturb_check}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="halfspace-penrose",
                                description="Mass, doubling pipeline and perturbation checks for half-space data.")
    p.add_argument("command", nargs="?", choices=COMMANDS, help="overrides [run] command")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--threads", type=int, metavar="N")
    p.add_argument("--tol", type=float, metavar="X")
    p.add_argument("--lambda", dest="lambda_", metavar="a,b,c")
    p.add_argument("--delta", metavar="a,b,c")
    p.add_argument("--grid", type=int, metavar="N")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    ov = {"command": args.command, "out": args.out, "threads": args.threads, "tol": args.tol,
          "lambda": args.lambda_, "delta": args.delta, "grid": args.grid}
    try:
        cfg = load_config(args.config, ov)
        _, ok = _RUNNERS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    print((Path(cfg.out) / "summary.txt").read_text(), end="")
    return EXIT_OK if ok else EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
