"""Command line front end: validated JSON configs in, CSV/JSON results plus a manifest out.

    singular-heat hum --config hum.json --out runs/hum
    singular-heat sweep --config refine.json --out runs/refine --workers 4
    singular-heat compare runs/a/manifest.json runs/b/manifest.json

Exit status is 0 when every declared check passes, 1 when a check fails (or,
with ``--strict``, when a warning is raised) and 2 for configuration or runtime
errors; failures are also written as ``failure.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .singular_operator import SIGMA_RANGE_MSG

KINDS = ("solve", "traces", "hardy", "carleman", "hum", "sweep")


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


# ---------------------------------------------------------------- schema

def _number(lo=None, hi=None, lo_open=False, hi_open=False, integer=False, interval_text=None):
    def check(value, path):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if integer and int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        bad = ((lo is not None and (value < lo or (lo_open and value == lo)))
               or (hi is not None and (value > hi or (hi_open and value == hi))))
        if bad or not math.isfinite(value):
            lo_b = "(" if lo_open else "["
            hi_b = ")" if hi_open else "]"
            rng = interval_text or f"{lo_b}{lo}, {hi}{hi_b}"
            raise ConfigError(f"{path}: {value!r} outside the admissible range {rng}")
        return int(value) if integer else float(value)
    return check


def _choice(*options):
    def check(value, path):
        if value not in options:
            raise ConfigError(f"{path}: expected one of {list(options)}, got {value!r}")
        return value
    return check


def _bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true or false, got {value!r}")
    return value


def _optional(check):
    def inner(value, path):
        return None if value is None else check(value, path)
    return inner


def _number_list(check=None, min_len=1):
    def inner(value, path):
        if not isinstance(value, list) or len(value) < min_len:
            raise ConfigError(f"{path}: expected a list of at least {min_len} numbers")
        item = check or _number()
        return [item(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return inner


def _profile(value, path):
    """Named field profile or a tabulated list of samples."""
    if isinstance(value, list):
        return _number_list()(value, path)
    if isinstance(value, str) and value in PROFILES:
        return value
    raise ConfigError(f"{path}: unknown profile {value!r} (choose from {sorted(PROFILES)} or give samples)")


_PRESET = re.compile(r"^(zero|drift|hardy_potential)(?:\(\s*([-+0-9.eE]+)\s*\))?$")


def _coefficient(kind):
    def check(value, path):
        if isinstance(value, list):
            return _number_list()(value, path)
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a preset name or samples, got {value!r}")
        m = _PRESET.match(value.strip())
        if not m:
            raise ConfigError(f"{path}: unknown preset {value!r}")
        name, arg = m.groups()
        if name == "zero" and arg is not None:
            raise ConfigError(f"{path}: 'zero' takes no argument")
        if name != "zero":
            if arg is None:
                raise ConfigError(f"{path}: preset {name} needs an argument, e.g. {name}(0.5)")
            try:
                float(arg)
            except ValueError:
                raise ConfigError(f"{path}: bad preset argument {arg!r}") from None
        if kind == "drift" and name == "hardy_potential":
            raise ConfigError(f"{path}: hardy_potential is a potential preset")
        if kind == "potential" and name == "drift":
            raise ConfigError(f"{path}: drift is a drift preset")
        return value.strip()
    return check


def _sides(value, path):
    if not isinstance(value, list) or not value or any(v not in ("left", "right") for v in value):
        raise ConfigError(f"{path}: expected a nonempty list drawn from ['left', 'right']")
    if len(set(value)) != len(value):
        raise ConfigError(f"{path}: repeated side")
    return list(value)


def _window(value, path):
    if value is None:
        return None
    vals = _number_list(min_len=2)(value, path)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise ConfigError(f"{path}: expected [start, end] with start < end")
    return vals


def _spec(check, default):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"check": check})
    return field(default=default, metadata={"check": check})


@dataclass
class GridSpec:
    n: int = _spec(_number(8, integer=True), 200)
    L: float = _spec(_number(0, lo_open=True), 1.0)
    blend_width: float = _spec(_number(0, 0.25, lo_open=True), 0.2)


@dataclass
class TimeSpec:
    T: float = _spec(_number(0, lo_open=True), 1.0)
    m_steps: int = _spec(_number(16, integer=True), 400)
    theta: float = _spec(_number(0.5, 1.0), 1.0)


@dataclass
class CoefficientSpec:
    Y: object = _spec(_coefficient("drift"), "zero")
    W: object = _spec(_coefficient("potential"), "zero")


@dataclass
class SolveSpec:
    u_T: object = _spec(_profile, "random_smooth")
    pulse_side: str = _spec(_choice("left", "right"), "left")
    pulse_window: list = _spec(_window, [0.2, 0.7])
    pulse_amplitude: float = _spec(_number(), 1.0)
    max_residual: float = _spec(_number(0, lo_open=True), 0.1)


@dataclass
class TracesSpec:
    u_T: object = _spec(_profile, "sine_squared")
    side: str = _spec(_choice("left", "right"), "left")
    stencil_depth: int = _spec(_number(2, 6, integer=True), 3)
    rate_margin: float = _spec(_number(0), 0.1)
    stencil_tolerance: float = _spec(_number(0, lo_open=True), 1e-3)


@dataclass
class HardySpec:
    hardy_coefficient: float = _spec(_number(0, 0.25), 0.25)
    method: str = _spec(_choice("twisted", "nodal"), "twisted")


@dataclass
class CarlemanSpec:
    p: object = _spec(lambda v, path: v if v == "auto" else _number(-0.5, 0, True, True)(v, path), "auto")
    margin: float = _spec(_number(0, 0.1, lo_open=True), 0.1)
    z: object = _spec(lambda v, path: v if v == "auto" else _number(0, lo_open=True)(v, path), "auto")
    lambdas: object = _spec(lambda v, path: v if v == "auto" else _number_list(_number(0, lo_open=True))(v, path),
                            "auto")
    x0: str = _spec(_choice("left", "right"), "left")
    radius: float = _spec(_number(0, lo_open=True), 0.2)
    dim: int = _spec(_number(1, 2, integer=True), 1)
    n_y: int = _spec(_number(16, integer=True), 400)
    n_t: int = _spec(_number(17, integer=True), 201)
    n_w: int = _spec(_number(9, integer=True), 41)
    flux_factor: float = _spec(_number(0), 1.0)
    quantile: float = _spec(_number(0.5, 1.0), 0.999)
    integrated_levels: list = _spec(_number_list(_number(16, integer=True)), [400, 800, 1600])
    write_ledger: bool = _spec(_bool, False)


@dataclass
class HumSpec:
    epsilon: float = _spec(_number(0, lo_open=True), 0.1)
    omega: list = _spec(_sides, ["left"])
    window: object = _spec(_window, None)
    target: object = _spec(_profile, "sine_normalized")
    norm: str = _spec(_choice("seminorm", "full"), "seminorm")
    safety: float = _spec(_number(0, 1, hi_open=True), 0.01)
    max_iter: int = _spec(_number(1, integer=True), 5000)
    tolerance: float = _spec(_number(0, lo_open=True), 1e-6)
    epsilons: object = _spec(_optional(_number_list(_number(0, lo_open=True))), None)
    variational_directions: int = _spec(_number(0, integer=True), 10)


def _name(value, path):
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{path}: expected a name")
    return value


def _sweep_rows(value, path):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a nonempty list of override objects")
    for i, row in enumerate(value):
        if not isinstance(row, dict) or not row:
            raise ConfigError(f"{path}[{i}]: expected a nonempty object of dotted-key overrides")
    return copy.deepcopy(value)


@dataclass
class SweepSpec:
    experiment: str = _spec(_choice(*KINDS[:-1]), "solve")
    rows: list = _spec(_sweep_rows, None)
    refinement_quantity: object = _spec(_optional(_name), None)
    min_ratio: float = _spec(_number(0), 1.5)



@dataclass
class ExperimentConfig:
    kind: str = _spec(_choice(*KINDS), "solve")
    sigma: float = _spec(_number(-0.75, 0.25, True, True, interval_text=SIGMA_RANGE_MSG), -0.3)
    seed: int = _spec(_number(0, integer=True), 0)
    grid: GridSpec = field(default_factory=GridSpec)
    time: TimeSpec = field(default_factory=TimeSpec)
    coefficients: CoefficientSpec = field(default_factory=CoefficientSpec)
    solve: SolveSpec = field(default_factory=SolveSpec)
    traces: TracesSpec = field(default_factory=TracesSpec)
    hardy: HardySpec = field(default_factory=HardySpec)
    carleman: CarlemanSpec = field(default_factory=CarlemanSpec)
    hum: HumSpec = field(default_factory=HumSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    checks: object = _spec(_optional(lambda v, p: _string_list(v, p)), None)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _string_list(value, path):
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ConfigError(f"{path}: expected a list of check names")
    return list(value)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        factory = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if isinstance(factory, type) and dataclasses.is_dataclass(factory):
            kwargs[name] = _build(factory, value, sub)
        else:
            kwargs[name] = f.metadata["check"](value, sub)
    return cls(**kwargs)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if cfg.kind == "sweep":
        if cfg.sweep.rows is None:
            raise ConfigError("sweep.rows: required for sweep experiments")
        base = {k: v for k, v in copy.deepcopy(data).items() if k not in ("sweep", "checks")}
        base["kind"] = cfg.sweep.experiment
        for i, row in enumerate(cfg.sweep.rows):
            try:
                config_from_dict(_apply_overrides(base, row))
            except ConfigError as exc:
                raise ConfigError(f"sweep.rows[{i}]: {exc}") from None
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read, validate and default-fill a JSON experiment config."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def _apply_overrides(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[keys[-1]] = value
    return out


# ---------------------------------------------------------------- output helpers

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return repr(float(value))


def write_csv(path: Path, header, rows) -> None:
    """CSV with a header row, '.' decimals (shortest round-trip repr) and LF endings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunResult:
    summary: dict
    checks: dict
    warnings: list
    files: list


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    version: str
    started: str
    finished: str
    files: list
    checks: dict
    warnings: list
    passed: bool
    summary: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- shared builders

PROFILES = ("sine", "sine_normalized", "sine_squared", "bump", "random_smooth")


def make_profile(spec, grid, seed: int = 0) -> np.ndarray:
    """Physical nodal field from a profile name or samples; boundary values forced to 0."""
    from .singular_operator import h_minus1_norm

    x = grid.nodes / grid.L
    if isinstance(spec, list):
        v = np.asarray(spec, dtype=float)
        if v.shape != (grid.n_nodes,):
            raise ConfigError(f"tabulated profile needs {grid.n_nodes} samples, got {v.size}")
        v = v.copy()
    elif spec == "sine":
        v = np.sin(np.pi * x)
    elif spec == "sine_normalized":
        v = np.sin(np.pi * x)
        v[0] = v[-1] = 0.0
        v = v / h_minus1_norm(grid, v[1:-1])
    elif spec == "sine_squared":
        v = np.sin(np.pi * x) ** 2 * (1 + x)
    elif spec == "bump":
        v = np.where((x > 0.05) & (x < 0.45), np.sin(np.pi * (x - 0.05) / 0.4) ** 4, 0.0)
    elif spec == "random_smooth":
        rng = np.random.default_rng(seed)
        coef = rng.standard_normal(6) / np.arange(1, 7) ** 2
        v = sum(c * np.sin((k + 1) * np.pi * x) for k, c in enumerate(coef))
    else:
        raise ConfigError(f"unknown profile {spec!r}")
    v[0] = v[-1] = 0.0
    return v


def make_coefficient_samples(spec, bdf, kind: str) -> np.ndarray:
    n = bdf.grid.n_nodes
    if isinstance(spec, list):
        v = np.asarray(spec, dtype=float)
        if v.shape != (n,):
            raise ConfigError(f"coefficients: tabulated samples need {n} entries, got {v.size}")
        return v
    m = _PRESET.match(spec)
    name, arg = m.groups()
    if name == "zero":
        return np.zeros(n)
    a = float(arg)
    if name == "drift":
        return np.full(n, a)
    y = bdf.values
    out = np.zeros(n)
    out[1:-1] = a / y[1:-1]
    return out


@dataclass
class Setup:
    grid: object
    bdf: object
    params: object
    time: object
    coeffs: object


def build_setup(cfg: ExperimentConfig) -> Setup:
    from .evolution import build_time_grid
    from .geometry import boundary_defining_function, build_grid
    from .singular_operator import kappa_from_sigma, make_coefficients

    grid = build_grid(cfg.grid.n, cfg.grid.L)
    bdf = boundary_defining_function(grid, cfg.grid.blend_width)
    params = kappa_from_sigma(cfg.sigma)
    time = build_time_grid(cfg.time.T, cfg.time.m_steps)
    Y = make_coefficient_samples(cfg.coefficients.Y, bdf, "drift")
    W = make_coefficient_samples(cfg.coefficients.W, bdf, "potential")
    return Setup(grid, bdf, params, time, make_coefficients(bdf, Y, W))


def _twisted(setup: Setup, u: np.ndarray) -> np.ndarray:
    phi = np.array(u, dtype=float)
    phi[1:-1] /= setup.bdf.values[1:-1] ** setup.params.kappa
    phi[0] = phi[-1] = 0.0
    return phi


def _trajectory_rows(traj):
    u = traj.physical()
    for t, row in zip(traj.time.times, u):
        yield [t, *row]


# ---------------------------------------------------------------- experiments

def run_solve(cfg: ExperimentConfig, out: Path) -> RunResult:
    from .evolution import BoundaryData, duality_residual, energy_report, solve_adjoint, solve_controlled
    from .singular_operator import assemble_operator

    s = build_setup(cfg)
    op = assemble_operator(s.grid, s.bdf, s.params, s.coeffs)
    theta = cfg.time.theta
    u_T = make_profile(cfg.solve.u_T, s.grid, cfg.seed)
    adj = solve_adjoint(op.adjoint(), _twisted(s, u_T), None, s.time, theta)
    t = s.time.times
    a, b = cfg.solve.pulse_window
    pulse = np.where((t > a) & (t < b), cfg.solve.pulse_amplitude * np.sin(np.pi * (t - a) / (b - a)) ** 2, 0.0)
    vd = BoundaryData.from_levels(s.time, **{cfg.solve.pulse_side: pulse})
    ctl = solve_controlled(op, np.zeros(s.grid.n_nodes), vd, s.time, theta)
    residual = duality_residual(adj, ctl, vd)
    energy = energy_report(adj)
    header = ["t"] + [f"x{i}" for i in range(s.grid.n_nodes)]
    write_csv(out / "adjoint.csv", header, _trajectory_rows(adj))
    write_csv(out / "controlled.csv", header, _trajectory_rows(ctl))
    write_csv(out / "grid.csv", ["i", "x", "y"], zip(range(s.grid.n_nodes), s.grid.nodes, s.bdf.values))
    summary = {"duality_residual": residual, "kappa": s.params.kappa, **energy}
    finite = bool(np.all(np.isfinite(adj.fields)) and np.all(np.isfinite(ctl.fields)))
    checks = {"finite": finite, "duality_residual": residual <= cfg.solve.max_residual}
    return RunResult(summary, checks, [], ["adjoint.csv", "controlled.csv", "grid.csv"])


def run_traces(cfg: ExperimentConfig, out: Path) -> RunResult:
    from .evolution import solve_adjoint
    from .singular_operator import assemble_operator
    from .traces import dirichlet_trace, neumann_trace, trace_convergence_rate

    s = build_setup(cfg)
    op = assemble_operator(s.grid, s.bdf, s.params, s.coeffs).adjoint()
    u_T = make_profile(cfg.traces.u_T, s.grid, cfg.seed)
    traj = solve_adjoint(op, _twisted(s, u_T), None, s.time, cfg.time.theta)
    side = cfg.traces.side
    D = dirichlet_trace(traj, side)
    depths = sorted({2, 3, 4, cfg.traces.stencil_depth})
    N = {d: neumann_trace(traj, side, d) for d in depths}
    slope, deltas, diffs = trace_convergence_rate(traj, side, return_details=True)
    write_csv(out / "traces.csv", ["t", "dirichlet"] + [f"neumann_depth{d}" for d in depths],
              zip(s.time.times, D, *(N[d] for d in depths)))
    write_csv(out / "rate.csv", ["delta", "flux_defect"], zip(deltas, diffs))
    mid = s.time.m_steps // 2
    vals = np.array([N[d][mid] for d in (2, 3, 4)])
    spread = float(np.ptp(vals) / max(abs(vals).max(), 1e-300))
    target = (1 + 2 * s.params.kappa) / 2 - cfg.traces.rate_margin
    summary = {"slope": slope, "slope_target": target, "stencil_spread": spread,
               "neumann_mid": float(N[cfg.traces.stencil_depth][mid]), "kappa": s.params.kappa}
    checks = {"dirichlet_zero": bool(np.all(D == 0)), "rate": slope >= target,
              "stencil_stable": spread <= cfg.traces.stencil_tolerance}
    return RunResult(summary, checks, [], ["traces.csv", "rate.csv"])


def run_hardy(cfg: ExperimentConfig, out: Path) -> RunResult:
    from .singular_operator import hardy_min_constant

    s = build_setup(cfg)
    c_h, phi = hardy_min_constant(s.grid, s.bdf, cfg.hardy.hardy_coefficient, method=cfg.hardy.method)
    write_csv(out / "eigenfield.csv", ["x", "phi"], zip(s.grid.nodes, phi))
    summary = {"c_h": c_h, "n": s.grid.n_cells, "hardy_coefficient": cfg.hardy.hardy_coefficient}
    checks = {"negative": c_h < 0}
    return RunResult(summary, checks, [], ["eigenfield.csv"])


def run_carleman(cfg: ExperimentConfig, out: Path) -> RunResult:
    from . import carleman as cm
    from .singular_operator import kappa_from_sigma

    c = cfg.carleman
    params = kappa_from_sigma(cfg.sigma)
    T = cfg.time.T
    w = np.linspace(-c.radius, c.radius, c.n_w) if c.dim == 2 else None
    fld = cm.manufactured_field(params, T=T, radius=c.radius, n_y=c.n_y, n_t=c.n_t, w=w)
    p = cm.select_p(params, c.margin) if c.p == "auto" else c.p
    delta = cm.select_delta(params, p)
    z = cm.select_z(params, p, delta, fld.y, dim=c.dim) if c.z == "auto" else c.z
    cw = cm.CarlemanWeight(params=params, p=p, lam=1.0, T=T, z=z, delta=delta, dim=c.dim, side=c.x0,
                           flux_factor=c.flux_factor, margin=c.margin)
    lambdas = None if c.lambdas == "auto" else c.lambdas
    res = cm.pointwise_check(fld, cw, lambdas=lambdas, quantile=c.quantile)
    files = ["sweep.csv", "integrated.csv"]
    write_csv(out / "sweep.csv", ["lambda", "fraction", "strict_fraction", "fitted_C", "worst_slack", "n_points"],
              ([r.lam, r.fraction, r.strict_fraction, r.fitted_C, r.worst_slack, r.n_points] for r in res.rows))
    lam_ref = res.rows[0].lam
    cwl = cw.with_lambda(lam_ref)
    if c.write_ledger:
        write_csv(out / "ledger.csv", ["t", "y", "w", "lhs", "divergence", "gradient_bulk", "cubic_bulk",
                                       "hardy_bulk", "slack", "log_weight"], res.ledger.rows(res.C))
        files.append("ledger.csv")
    bounds = cm.fit_flux_bounds(fld, cwl)
    integ = []
    for n in c.integrated_levels:
        f_u = cm.manufactured_field(params, T=T, radius=c.radius, n_y=n, n_t=c.n_t, spacing="uniform",
                                    w=w)
        h = c.radius / n
        r = cm.integrated_check(f_u, cwl, res.C, bounds.normal_flux_constant, 4 * h)
        integ.append((n, 4 * h, r))
    write_csv(out / "integrated.csv", ["n", "level", "lhs", "rhs", "satisfied", "bulk", "source",
                                       "boundary_bound", "boundary_cross", "boundary_flux"],
              ([n, lv, r.lhs, r.rhs, r.satisfied, r.bulk, r.source, r.boundary_bound, r.boundary_cross,
                r.boundary_flux] for n, lv, r in integ))
    bb = [r.boundary_bound for _, _, r in integ]
    summary = {"p": p, "z": z, "delta": delta, "lambda0": res.lambda0, "C": res.C,
               "C_bar_time": bounds.time_density_constant, "C_bar_flux": bounds.normal_flux_constant,
               "min_fraction": res.min_fraction, "y3_channel": res.y3_channel,
               "positivity": cm.positivity_coefficient(delta, p, cfg.sigma)}
    checks = {"fraction": res.min_fraction >= c.quantile, "C_positive": res.C > 0,
              "integrated": all(r.satisfied for _, _, r in integ),
              "boundary_decreasing": all(b2 < b1 for b1, b2 in zip(bb, bb[1:]))}
    if cfg.sigma < 0 and p == params.kappa:
        checks["y3_channel"] = abs(res.y3_channel) <= 1e-12
    warnings = [] if res.monotone else ["strict satisfaction fraction is not monotone over the sweep"]
    return RunResult(summary, checks, warnings, files)


def run_hum(cfg: ExperimentConfig, out: Path) -> RunResult:
    from .hum import (ControlProblem, MinimizeOptions, dot_product_test, epsilon_sweep, minimize,
                      variational_check)
    from .singular_operator import h_minus1_norm

    s = build_setup(cfg)
    hc = cfg.hum
    v_T = make_profile(hc.target, s.grid, cfg.seed)
    problem = ControlProblem(grid=s.grid, bdf=s.bdf, params=s.params, time=s.time, v_T=v_T,
                             epsilon=hc.epsilon, omega=tuple(hc.omega),
                             window=None if hc.window is None else tuple(hc.window), coeffs=s.coeffs,
                             theta=cfg.time.theta, norm=hc.norm, safety=hc.safety)
    opts = MinimizeOptions(max_iter=hc.max_iter, tolerance=hc.tolerance, seed=cfg.seed)
    dot = dot_product_test(problem, n_pairs=10, seed=cfg.seed)
    it, res = minimize(problem, opts)
    pairs = variational_check(problem, it.u_T, n_dirs=hc.variational_directions, seed=cfg.seed + 1)
    var_ratio = max((a / b for a, b in pairs), default=0.0)
    t = s.time.times
    write_csv(out / "control.csv", ["t", "left", "right"], zip(t, res.v_d.left, res.v_d.right))
    write_csv(out / "final_state.csv", ["x", "target", "state"], zip(s.grid.nodes, v_T, res.final_state))
    write_csv(out / "history.csv", ["iteration", "objective"], enumerate(res.history))
    files = ["control.csv", "final_state.csv", "history.csv"]
    target_norm = h_minus1_norm(s.grid, v_T[1:-1])
    summary = {"achieved_error": res.achieved_error, "control_norm": res.control_norm,
               "iterations": res.iterations, "converged": res.converged, "epsilon": res.epsilon,
               "target_norm": target_norm, "dot_product": dot, "variational_ratio": var_ratio}
    checks = {"adjoint": dot <= 1e-10, "converged": res.converged,
              "error_within_epsilon": res.achieved_error <= hc.epsilon, "variational": var_ratio <= 1.0}
    warnings = []
    if hc.epsilons:
        eps_list = [f * target_norm for f in hc.epsilons]
        rows = epsilon_sweep(problem, eps_list, opts)
        write_csv(out / "epsilon_sweep.csv", ["epsilon", "control_norm", "achieved_error", "iterations",
                                              "converged"],
                  ([r["epsilon"], r["control_norm"], r["achieved_error"], r["iterations"], r["converged"]]
                   for r in rows))
        files.append("epsilon_sweep.csv")
        norms = [r["control_norm"] for r in rows]
        checks["sweep_monotone"] = all(b >= a for a, b in zip(norms, norms[1:]))
        checks["sweep_errors"] = all(r["achieved_error"] <= r["epsilon"] for r in rows if r["converged"])
        if not all(r["converged"] for r in rows):
            warnings.append("some epsilon-sweep rows did not converge")
    if not res.converged:
        warnings.append("minimizer did not reach the tolerance")
    return RunResult(summary, checks, warnings, files)


def _row_worker(args):
    row_cfg, row_dir = args
    cfg = config_from_dict(row_cfg)
    manifest = execute(cfg, Path(row_dir))
    return manifest.to_dict()


def run_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunResult:
    raw = cfg.to_dict()
    base = {k: v for k, v in raw.items() if k not in ("sweep", "checks")}
    base["kind"] = cfg.sweep.experiment
    jobs = []
    for i, row in enumerate(cfg.sweep.rows):
        jobs.append((_apply_overrides(base, row), str(out / f"row_{i:03d}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(_row_worker, jobs))
    else:
        manifests = [_row_worker(j) for j in jobs]
    keys = sorted({k for m in manifests for k, v in m["summary"].items() if _is_scalar(v)})
    over_keys = sorted({k for row in cfg.sweep.rows for k in row})
    rows = []
    for i, (row, m) in enumerate(zip(cfg.sweep.rows, manifests)):
        rows.append([i, *(_scalar_cell(row.get(k)) for k in over_keys),
                     *(_scalar_cell(m["summary"].get(k)) for k in keys), m["passed"]])
    write_csv(out / "sweep.csv", ["row", *over_keys, *keys, "passed"], rows)
    checks = {f"row_{i:03d}": m["passed"] for i, m in enumerate(manifests)}
    summary = {"rows": len(manifests)}
    q = cfg.sweep.refinement_quantity
    if q is not None:
        vals = [m["summary"].get(q) for m in manifests]
        if any(not _is_scalar(v) for v in vals):
            raise ConfigError(f"sweep.refinement_quantity: {q!r} is not a scalar output of every row")
        ratios = [a / b if b else math.inf for a, b in zip(vals, vals[1:])]
        summary["refinement_ratios"] = ratios
        checks["refinement"] = all(r >= cfg.sweep.min_ratio for r in ratios)
    warnings = [w for m in manifests for w in m["warnings"]]
    return RunResult(summary, checks, warnings, ["sweep.csv"])


def _is_scalar(v):
    return isinstance(v, (int, float, bool)) and not isinstance(v, str)


def _scalar_cell(v):
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    if isinstance(v, str):
        return v
    return v


RUNNERS = {"solve": run_solve, "traces": run_traces, "hardy": run_hardy, "carleman": run_carleman,
           "hum": run_hum}


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def execute(cfg: ExperimentConfig, out: Path, workers: int = 1) -> RunManifest:
    """Run one experiment into ``out`` and write its manifest."""
    out.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    if cfg.kind == "sweep":
        result = run_sweep(cfg, out, workers)
    else:
        result = RUNNERS[cfg.kind](cfg, out)
    checks = result.checks
    if cfg.checks is not None:
        missing = [c for c in cfg.checks if c not in checks]
        if missing:
            raise ConfigError(f"checks: unknown check(s) {missing} for kind {cfg.kind} "
                              f"(available: {sorted(checks)})")
        checks = {k: checks[k] for k in cfg.checks}
    write_json(out / "summary.json", result.summary)
    write_json(out / "config.json", cfg.to_dict())
    files = []
    for name in [*result.files, "summary.json", "config.json"]:
        p = out / name
        files.append({"path": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = RunManifest(kind=cfg.kind, config_hash=cfg.digest(), version=__version__, started=started,
                           finished=_utc_now(), files=files, checks={k: bool(v) for k, v in checks.items()},
                           warnings=list(result.warnings), passed=all(bool(v) for v in checks.values()),
                           summary=_jsonable(result.summary))
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def run(cfg: ExperimentConfig, out, workers: int = 1, strict: bool = False) -> tuple[RunManifest, int]:
    manifest = execute(cfg, Path(out), workers)
    ok = manifest.passed and (not strict or not manifest.warnings)
    return manifest, 0 if ok else 1


def verify_manifest(path) -> list:
    """Files whose checksum no longer matches the manifest (empty when all agree)."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for entry in data["files"]:
        p = path.parent / entry["path"]
        if not p.exists() or sha256_file(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad


def compare(manifest_a, manifest_b) -> dict:
    """Relative differences and ratios of scalar summary outputs of two runs of one kind."""
    a = json.loads(Path(manifest_a).read_text(encoding="utf-8"))
    b = json.loads(Path(manifest_b).read_text(encoding="utf-8"))
    if a["kind"] != b["kind"]:
        raise ConfigError(f"cannot compare a {a['kind']!r} run with a {b['kind']!r} run")
    diffs = {}
    for key in sorted(set(a["summary"]) & set(b["summary"])):
        va, vb = a["summary"][key], b["summary"][key]
        if not (_is_scalar(va) and _is_scalar(vb)) or isinstance(va, bool):
            if va != vb:
                diffs[key] = {"a": va, "b": vb}
            continue
        if va == vb:
            continue
        scale = max(abs(va), abs(vb))
        diffs[key] = {"a": va, "b": vb, "relative_difference": abs(va - vb) / scale,
                      "ratio": va / vb if vb != 0 else "inf"}
    return {"kind": a["kind"], "differences": diffs}


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singular-heat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="parallel workers for sweep rows")
        sp.add_argument("--strict", action="store_true", help="treat warnings as failures")
    cp = sub.add_parser("compare", help="compare the scalar outputs of two runs")
    cp.add_argument("manifests", nargs=2, help="two manifest.json files")
    cp.add_argument("--out", help="write the diff report here instead of stdout")
    return ap


def _fail(out, message: str, kind: str = "error") -> int:
    report = {"status": "failed", "kind": kind, "message": message}
    sys.stderr.write(json.dumps(report) + "\n")
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            write_json(Path(out) / "failure.json", report)
        except OSError:
            pass
    return 2


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "compare":
        try:
            report = compare(*args.manifests)
        except (ConfigError, OSError, KeyError, json.JSONDecodeError) as exc:
            return _fail(None, str(exc), "compare")
        text = json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return 0
    if args.workers < 1:
        return _fail(args.out, "--workers must be at least 1", "usage")
    try:
        cfg = parse_config(args.config)
        if cfg.kind != args.command:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if "kind" in data:
                raise ConfigError(f"kind: config declares {cfg.kind!r} but the subcommand is {args.command!r}")
            cfg = dataclasses.replace(cfg, kind=args.command)
            if cfg.kind == "sweep" and cfg.sweep.rows is None:
                raise ConfigError("sweep.rows: required for sweep experiments")
        manifest, code = run(cfg, args.out, args.workers, args.strict)
    except ConfigError as exc:
        return _fail(args.out, str(exc), "config")
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        return _fail(args.out, f"{type(exc).__name__}: {exc}", "runtime")
    status = {"status": "passed" if code == 0 else "failed", "kind": manifest.kind,
              "checks": manifest.checks, "warnings": manifest.warnings,
              "manifest": os.path.join(args.out, "manifest.json")}
    sys.stdout.write(json.dumps(status, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
