"""Config-driven experiment runner.

Every subcommand resolves its options into a flat ``section.key=value``
configuration, echoes the fully resolved form (defaults included) to
``manifest.cfg`` in the output directory, and writes CSV artifacts plus a
standalone plot script.  Re-running ``regvar run manifest.cfg`` reproduces
the CSVs byte for byte.  Figures are rendered to PNG alongside the data when
matplotlib is available (``--no-figures`` to skip).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Callable, Dict

import numpy as np

from . import plotting
from .grid_paths import Grid, ProcessSpec, ensemble, ensemble_to_csv, path_to_csv
from .regcalc import (
    EpsSchedule,
    QVTarget,
    forward_integral_curve_eps,
    ladder_diverges,
    make_series,
    lagged_diff,
)
from .chi_window import (
    PointEval,
    SquareMeasure,
    SquaredMean,
    SquaredNorm,
    chi_qv_formula,
    chi_qv_series,
)
from .ito_verify import CF12, banach_ito_report, scalar_ito_report
from .replicate import VanillaPayoff, default_model_zoo, replicate_payoff
from .hilbert_kolmo import (
    GalerkinSpace,
    LinearQuadraticSolution,
    kolmogorov_mc,
    decomposition_check,
    hs_identity_check,
    martingale_bracket_Q_phi,
    pairing_trace,
    rank_one_tensor,
    tensor_operator,
    functional_operator,
    trace_and_bounds,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Flat configuration
# ---------------------------------------------------------------------------

GLOBAL_KEYS = {
    "run.subcommand": (None, str),
    "run.seed": ("1234", int),
    "run.threads": ("1", int),
    "run.out": ("out", str),
    "run.figures": ("true", str),
}

SCHEMAS: Dict[str, Dict[str, tuple]] = {
    "simulate": {
        "process.spec": (None, str),
        "grid.n": ("1024", int),
        "grid.horizon": ("1.0", float),
        "sim.paths": ("1", int),
    },
    "qv": {
        "process.spec": (None, str),
        "grid.n": ("4096", int),
        "grid.horizon": ("1.0", float),
        "eps.ladder": ("64,32,16,8,4,2", str),
        "qv.t": ("", str),
        "sim.paths": ("100", int),
    },
    "forward": {
        "process.spec": (None, str),
        "grid.n": ("4096", int),
        "grid.horizon": ("1.0", float),
        "eps.ladder": ("64,32,16,8,4,2", str),
        "forward.integrand": ("path", str),
        "forward.t": ("", str),
        "forward.improper": ("false", str),
        "sim.paths": ("100", int),
    },
    "window-qv": {
        "process.spec": (None, str),
        "grid.n": ("2048", int),
        "grid.horizon": ("1.0", float),
        "eps.ladder": ("64,32,16,8,4,2", str),
        "measure.spec": ("", str),
        "measure.atom": ("", str),
        "measure.diag": ("", str),
        "measure.l2": ("", str),
        "window.t": ("", str),
        "window.qv_sigma": ("1.0", float),
        "sim.paths": ("50", int),
    },
    "ito-check": {
        "process.spec": ("bm(sigma=1)", str),
        "grid.n": ("2048", int),
        "grid.horizon": ("1.0", float),
        "eps.ladder": ("64,32,16,8,4,2", str),
        "ito.functional": (None, str),
        "sim.paths": ("64", int),
    },
    "replicate": {
        "replicate.payoff": ("square", str),
        "replicate.sigma": ("1.0", float),
        "replicate.models": ("bm,dirichlet,bifbm", str),
        "grid.n": ("4096", int),
        "grid.horizon": ("1.0", float),
        "eps.ladder": ("64,32,16,8,4,2", str),
        "sim.paths": ("100", int),
    },
    "kolmo": {
        "kolmo.dim": ("16", int),
        "kolmo.a": ("heat", str),
        "kolmo.q": ("power:2", str),
        "kolmo.coeffs": ("ou", str),
        "kolmo.sigma_scale": ("1.0", float),
        "kolmo.g": ("quad", str),
        "kolmo.s": ("0.5", float),
        "kolmo.eta": ("const:0.5", str),
        "kolmo.steps": ("256", int),
        "kolmo.mode": ("value", str),
        "kolmo.dt_ladder": ("16,32,64,128,256", str),
        "sim.paths": ("10000", int),
    },
    "selftest": {},
}


def resolve_config(subcommand: str, overrides: Dict[str, str]) -> Dict[str, str]:
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    schema = dict(GLOBAL_KEYS)
    schema.update(SCHEMAS[subcommand])
    cfg: Dict[str, str] = {}
    for key, (default, _) in schema.items():
        if default is not None:
            cfg[key] = default
    cfg["run.subcommand"] = subcommand
    for key, value in overrides.items():
        if key == "run.subcommand":
            continue
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for subcommand {subcommand!r}")
        cfg[key] = value
    for key, (default, _) in schema.items():
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    return cfg


def _get(cfg: Dict[str, str], key: str):
    schema = dict(GLOBAL_KEYS)
    schema.update(SCHEMAS[cfg["run.subcommand"]])
    caster = schema[key][1]
    return caster(cfg[key])


def _bool(cfg: Dict[str, str], key: str) -> bool:
    return cfg[key].strip().lower() in ("1", "true", "yes", "on")


def write_manifest(cfg: Dict[str, str], out_dir: str) -> str:
    path = os.path.join(out_dir, "manifest.cfg")
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path: str) -> Dict[str, str]:
    cfg: Dict[str, str] = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r}")
            key, _, value = line.partition("=")
            cfg[key.strip()] = value.strip()
    return cfg


# ---------------------------------------------------------------------------
# Spec-string parsers
# ---------------------------------------------------------------------------

def _split_call(text: str):
    text = text.strip()
    if "(" not in text:
        return text, {}
    if not text.endswith(")"):
        raise ConfigError(f"malformed spec {text!r}")
    name, _, body = text[:-1].partition("(")
    args = {}
    if body.strip():
        for item in body.split(","):
            k, _, v = item.partition("=")
            if not v:
                raise ConfigError(f"malformed argument {item!r} in {text!r}")
            args[k.strip()] = v.strip()
    return name.strip(), args


def parse_process(text: str) -> ProcessSpec:
    name, args = _split_call(text)
    try:
        if name == "bm":
            return ProcessSpec.brownian(float(args.get("sigma", 1.0)))
        if name == "fbm":
            return ProcessSpec.fractional(float(args.get("h", 0.75)))
        if name == "bifbm":
            return ProcessSpec.bifractional(
                float(args.get("h", 0.625)), float(args.get("k", 0.8)),
                scale=float(args.get("scale", 1.0)))
        if name == "dirichlet":
            return ProcessSpec.dirichlet(
                ProcessSpec.brownian(float(args.get("sigma", 1.0))),
                ProcessSpec.fractional(float(args.get("h", 0.75))),
                scale=float(args.get("scale", 0.5)))
        if name == "bv":
            return ProcessSpec.bounded_variation()
        if name == "det":
            return ProcessSpec.deterministic(args.get("id", "const:0"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown process kind {name!r}")


def parse_ladder(text: str) -> tuple:
    try:
        lags = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad eps ladder {text!r}") from exc
    if not lags:
        raise ConfigError("empty eps ladder")
    return lags


def parse_measure(text: str, w: int) -> SquareMeasure:
    total = None
    for part in text.split("+"):
        tokens = part.strip().split(":")
        kind = tokens[0]
        if kind == "atom":
            lam = float(tokens[1]) if len(tokens) > 1 else 1.0
            mu = SquareMeasure.dirac_atom(lam)
        elif kind == "diag":
            if len(tokens) >= 3 and tokens[1] == "const":
                mu = SquareMeasure.diagonal(float(tokens[2]), w)
            else:
                mu = SquareMeasure.diagonal(1.0, w)
        elif kind == "l2":
            c = float(tokens[2]) if len(tokens) >= 3 and tokens[1] == "const" else 1.0
            mu = SquareMeasure.l2_constant(c, w)
        else:
            raise ConfigError(f"unknown measure component {part!r}")
        total = mu if total is None else total + mu
    if total is None:
        raise ConfigError("empty measure spec")
    return total


def parse_payoff(text: str, sigma: float) -> VanillaPayoff:
    name, _, arg = text.partition(":")
    if name == "linear":
        return VanillaPayoff(f=lambda x: np.asarray(x, dtype=float),
                             df=lambda x: np.ones_like(np.asarray(x, dtype=float)),
                             sigma=sigma, name="linear")
    if name == "square":
        return VanillaPayoff(f=lambda x: np.asarray(x, dtype=float) ** 2,
                             df=lambda x: 2.0 * np.asarray(x, dtype=float),
                             sigma=sigma, name="square")
    if name == "call":
        strike = float(arg) if arg else 0.0
        return VanillaPayoff(f=lambda x: np.maximum(np.asarray(x, dtype=float) - strike, 0.0),
                             sigma=sigma, name=f"call:{strike:g}")
    if name in ("table", "custom-table"):
        if not arg:
            raise ConfigError("table payoff needs a csv path: table:<file>")
        data = np.loadtxt(arg, delimiter=",", skiprows=1)
        xs, ys = data[:, 0], data[:, 1]
        return VanillaPayoff(f=lambda x: np.interp(x, xs, ys), sigma=sigma, name="table")
    raise ConfigError(f"unknown payoff {text!r}")


def parse_eigs(text: str, d: int, kind: str) -> np.ndarray:
    name, _, arg = text.partition(":")
    i = np.arange(1, d + 1, dtype=float)
    if kind == "a":
        if name == "heat":
            return -((i * np.pi) ** 2)
        if name == "ou":
            rate = float(arg) if arg else 1.0
            return -rate * i
        if name == "table":
            vals = np.array([float(v) for v in arg.split(";")])
            if len(vals) != d:
                raise ConfigError(f"expected {d} generator eigenvalues, got {len(vals)}")
            return vals
    else:
        if name == "power":
            p = float(arg) if arg else 2.0
            return i ** (-p)
        if name == "table":
            vals = np.array([float(v) for v in arg.split(";")])
            if len(vals) != d:
                raise ConfigError(f"expected {d} noise eigenvalues, got {len(vals)}")
            return vals
    raise ConfigError(f"unknown eigenvalue spec {text!r}")


def parse_vector(text: str, d: int) -> np.ndarray:
    name, _, arg = text.partition(":")
    if name == "const":
        return np.full(d, float(arg) if arg else 0.0)
    if name == "decay":
        p = float(arg) if arg else 1.0
        return np.arange(1, d + 1, dtype=float) ** (-p)
    if name == "table":
        vals = np.array([float(v) for v in arg.split(";")])
        if len(vals) != d:
            raise ConfigError(f"expected {d} entries, got {len(vals)}")
        return vals
    raise ConfigError(f"unknown vector spec {text!r}")


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _write(out_dir: str, name: str, text: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _series_csv(series, t: float) -> str:
    lines = ["eps,t,estimate,stderr"]
    mean = series.mean if series.mean is not None else series.values
    err = series.stderr if series.stderr is not None else np.zeros_like(series.eps)
    for e, v, s in zip(series.eps, np.atleast_1d(mean), np.atleast_1d(err)):
        lines.append(f"{_fmt(e)},{_fmt(t)},{_fmt(v)},{_fmt(s)}")
    return "\n".join(lines) + "\n"


def _summary_csv(pairs) -> str:
    lines = ["key,value"]
    for k, v in pairs:
        lines.append(f"{k},{v if isinstance(v, str) else _fmt(float(v))}")
    return "\n".join(lines) + "\n"


def _grid_of(cfg) -> Grid:
    return Grid(T=_get(cfg, "grid.horizon"), n=_get(cfg, "grid.n"))


def _time_of(cfg, key: str, grid: Grid) -> float:
    raw = cfg.get(key, "").strip()
    return grid.T if not raw else float(raw)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def run_simulate(cfg, out_dir):
    spec = parse_process(cfg["process.spec"])
    grid = _grid_of(cfg)
    m = _get(cfg, "sim.paths")
    ens = ensemble(spec, grid, m, _get(cfg, "run.seed"))
    ens.matrix(threads=_get(cfg, "run.threads"))
    if m == 1:
        _write(out_dir, "paths.csv", path_to_csv(ens.path(0)))
    else:
        _write(out_dir, "paths.csv", ensemble_to_csv(ens))
    return EXIT_OK


def run_qv(cfg, out_dir):
    spec = parse_process(cfg["process.spec"])
    grid = _grid_of(cfg)
    schedule = EpsSchedule(parse_ladder(cfg["eps.ladder"]), grid.dt)
    t = _time_of(cfg, "qv.t", grid)
    paths = ensemble(spec, grid, _get(cfg, "sim.paths"),
                     _get(cfg, "run.seed")).matrix(threads=_get(cfg, "run.threads"))
    from .regcalc import qv_ensemble
    series = qv_ensemble(paths, grid, schedule, t)
    _write(out_dir, "qv.csv", _series_csv(series, t))
    _write(out_dir, "summary.csv", _summary_csv([
        ("extrapolated", series.extrapolated),
        ("monotone", str(series.diagnostics["monotone"]).lower()),
        ("last_rel_change", series.diagnostics["last_rel_change"]),
    ]))
    return EXIT_OK


def run_forward(cfg, out_dir):
    spec = parse_process(cfg["process.spec"])
    grid = _grid_of(cfg)
    schedule = EpsSchedule(parse_ladder(cfg["eps.ladder"]), grid.dt)
    t = _time_of(cfg, "forward.t", grid)
    paths = ensemble(spec, grid, _get(cfg, "sim.paths"),
                     _get(cfg, "run.seed")).matrix(threads=_get(cfg, "run.threads"))
    kind = cfg["forward.integrand"]
    if kind == "one":
        y = np.ones_like(paths[:, :-1])
    elif kind == "time":
        y = np.broadcast_to(grid.points[:-1], paths[:, :-1].shape)
    elif kind == "path":
        y = paths[:, :-1]
    elif kind == "invtime":
        y = np.broadcast_to(1.0 / (grid.T - grid.points[:-1]), paths[:, :-1].shape)
    else:
        raise ConfigError(f"unknown integrand {kind!r}")
    m_idx = grid.index_of(t)
    vals = []
    for lag in schedule.lags:
        prod = y[:, :m_idx] * lagged_diff(paths, lag)[:, :m_idx]
        vals.append(prod.sum(axis=-1) / lag)
    series = make_series(schedule.eps_values, np.stack(vals, axis=-1))
    diverged = False
    if _bool(cfg, "forward.improper"):
        lag = schedule.smallest_lag
        curve = forward_integral_curve_eps(y, paths, lag)
        delta_lags = [dl for dl in (16, 8, 4, 2) if dl < grid.n]
        deltas = np.array([dl * grid.dt for dl in delta_lags])
        per_delta = np.stack([curve[:, grid.n - dl] for dl in delta_lags], axis=-1)
        improper = make_series(deltas, per_delta)
        mean_vals = improper.mean if improper.mean is not None else improper.values
        diverged = ladder_diverges(np.atleast_2d(mean_vals)[-1] if mean_vals.ndim > 1
                                   else mean_vals)
        _write(out_dir, "improper.csv", _series_csv(improper, grid.T))
    _write(out_dir, "forward.csv", _series_csv(series, t))
    _write(out_dir, "summary.csv", _summary_csv([
        ("extrapolated", series.extrapolated),
        ("divergence", str(bool(diverged)).lower()),
    ]))
    if diverged:
        raise NumericalFailure("improper forward integral did not stabilize")
    return EXIT_OK


def _measure_from_config(cfg, w: int) -> SquareMeasure:
    """Component blocks (measure.atom / .diag / .l2) or the compact spec string."""
    parts = []
    if cfg["measure.atom"]:
        parts.append(f"atom:{cfg['measure.atom']}")
    if cfg["measure.diag"]:
        parts.append(f"diag:{cfg['measure.diag']}")
    if cfg["measure.l2"]:
        parts.append(f"l2:{cfg['measure.l2']}")
    if cfg["measure.spec"]:
        parts.append(cfg["measure.spec"])
    if not parts:
        parts = ["atom:1"]
    return parse_measure("+".join(parts), w)


def run_window_qv(cfg, out_dir):
    spec = parse_process(cfg["process.spec"])
    grid = _grid_of(cfg)
    schedule = EpsSchedule(parse_ladder(cfg["eps.ladder"]), grid.dt)
    t = _time_of(cfg, "window.t", grid)
    mu = _measure_from_config(cfg, grid.n)
    paths = ensemble(spec, grid, _get(cfg, "sim.paths"),
                     _get(cfg, "run.seed")).matrix(threads=_get(cfg, "run.threads"))
    series = chi_qv_series(mu, paths, grid, schedule, t)
    sigma = _get(cfg, "window.qv_sigma")
    target = QVTarget.linear(sigma)
    formula = chi_qv_formula(mu, target, t, grid)
    _write(out_dir, "window_qv.csv", _series_csv(series, t))
    _write(out_dir, "summary.csv", _summary_csv([
        ("extrapolated", series.extrapolated),
        ("closed_form", formula),
        ("declared_sigma", sigma),
    ]))
    return EXIT_OK


_SCALAR_MAPS = {
    "x2": CF12(f=lambda t, x: x * x, ft=lambda t, x: 0.0 * x,
               fx=lambda t, x: 2.0 * x, fxx=lambda t, x: 2.0 + 0.0 * x, name="x2"),
    "tx": CF12(f=lambda t, x: t * x, ft=lambda t, x: x,
               fx=lambda t, x: t + 0.0 * x, fxx=lambda t, x: 0.0 * x, name="tx"),
    "sin": CF12(f=lambda t, x: np.sin(x), ft=lambda t, x: 0.0 * x,
                fx=lambda t, x: np.cos(x), fxx=lambda t, x: -np.sin(x), name="sin"),
}

_WINDOW_FUNCTIONALS = {
    "point": PointEval(f=lambda x: x ** 2, df=lambda x: 2.0 * x,
                       d2f=lambda x: 2.0 + 0.0 * x, name="point"),
    "sqmean": SquaredMean(),
    "sqnorm": SquaredNorm(),
}


def run_ito_check(cfg, out_dir):
    spec = parse_process(cfg["process.spec"])
    grid = _grid_of(cfg)
    schedule = EpsSchedule(parse_ladder(cfg["eps.ladder"]), grid.dt)
    paths = ensemble(spec, grid, _get(cfg, "sim.paths"),
                     _get(cfg, "run.seed")).matrix(threads=_get(cfg, "run.threads"))
    name = cfg["ito.functional"]
    if name in _SCALAR_MAPS:
        report = scalar_ito_report(_SCALAR_MAPS[name], paths, grid, schedule, grid.T)
    elif name in _WINDOW_FUNCTIONALS:
        report = banach_ito_report(_WINDOW_FUNCTIONALS[name], paths, grid, schedule, grid.T)
    else:
        raise ConfigError(f"unknown functional {name!r}")
    lines = ["eps,median_sup_residual"]
    for e, r in zip(report.eps, report.median_sup_residual):
        lines.append(f"{_fmt(e)},{_fmt(r)}")
    _write(out_dir, "ito.csv", "\n".join(lines) + "\n")
    _write(out_dir, "summary.csv", _summary_csv(
        [("functional", name), ("scale", report.scale)]
        + sorted(report.terms.items())))
    return EXIT_OK


def run_replicate(cfg, out_dir):
    sigma = _get(cfg, "replicate.sigma")
    payoff = parse_payoff(cfg["replicate.payoff"], sigma)
    grid = _grid_of(cfg)
    schedule = EpsSchedule(parse_ladder(cfg["eps.ladder"]), grid.dt)
    zoo = default_model_zoo(sigma)
    names = [m.strip() for m in cfg["replicate.models"].split(",") if m.strip()]
    unknown = [m for m in names if m not in zoo]
    if unknown:
        raise ConfigError(f"unknown models {unknown}; choose from {sorted(zoo)}")
    m = _get(cfg, "sim.paths")
    seed = _get(cfg, "run.seed")
    rows = ["model,path_id,h,G0,hedge_integral,residual"]
    summary = []
    for name in names:
        report = replicate_payoff(payoff, zoo[name], grid, schedule, m, seed,
                                  threads=_get(cfg, "run.threads"))
        for model, pid, h, g0, integral, resid in report.rows():
            rows.append(f"{name},{pid},{_fmt(h)},{_fmt(g0)},{_fmt(integral)},{_fmt(resid)}")
        summary += [
            (f"{name}.mean_abs_residual", report.mean_abs_residual),
            (f"{name}.stderr_abs_residual", report.stderr_abs_residual),
            (f"{name}.mean_abs_payoff", report.mean_abs_payoff),
            (f"{name}.qv_warning", str(report.qv_warning).lower()),
            (f"{name}.improper", str(report.improper).lower()),
        ]
    _write(out_dir, "hedge.csv", "\n".join(rows) + "\n")
    _write(out_dir, "summary.csv", _summary_csv(summary))
    return EXIT_OK


def _kolmo_setup(cfg):
    d = _get(cfg, "kolmo.dim")
    space = GalerkinSpace(a=parse_eigs(cfg["kolmo.a"], d, "a"),
                          q=parse_eigs(cfg["kolmo.q"], d, "q"))
    if cfg["kolmo.coeffs"] != "ou":
        raise ConfigError("only the 'ou' coefficient family ships with the CLI")
    sigma_bar = _get(cfg, "kolmo.sigma_scale") * np.eye(d)
    eta = parse_vector(cfg["kolmo.eta"], d)
    gname = cfg["kolmo.g"]
    if gname == "quad":
        lq = LinearQuadraticSolution(space=space, sigma_bar=sigma_bar,
                                     G=np.eye(d), c=np.zeros(d))
    elif gname == "linear":
        lq = LinearQuadraticSolution(space=space, sigma_bar=sigma_bar,
                                     G=np.zeros((d, d)), c=np.ones(d))
    else:
        raise ConfigError(f"unknown value functional {gname!r}")
    return space, lq, eta


def run_kolmo(cfg, out_dir):
    space, lq, eta = _kolmo_setup(cfg)
    s = _get(cfg, "kolmo.s")
    seed = _get(cfg, "run.seed")
    mode = cfg["kolmo.mode"]
    if mode == "value":
        m = _get(cfg, "sim.paths")
        steps = _get(cfg, "kolmo.steps")
        oracle = lq.value(s, eta)
        problem = lq.problem(s, eta)
        lines = ["m,V_hat,stderr,oracle,rel_err"]
        excluded = 0
        for mm in sorted({max(m // 100, 100), max(m // 10, 100), m}):
            res = kolmogorov_mc(problem, mm, seed, n_steps=steps)
            rel = abs(res["value"] - oracle) / max(abs(oracle), 1e-300)
            excluded += res["excluded"]
            lines.append(f"{mm},{_fmt(res['value'])},{_fmt(res['stderr'])},"
                         f"{_fmt(oracle)},{_fmt(rel)}")
        _write(out_dir, "kolmo.csv", "\n".join(lines) + "\n")
        if excluded > 0.01 * m:
            raise NumericalFailure(f"{excluded} non-finite Monte Carlo draws")
        return EXIT_OK
    if mode == "decomposition":
        ladder = [int(v) for v in cfg["kolmo.dt_ladder"].split(",")]
        m = _get(cfg, "sim.paths")
        lines = ["dt,mean_R,se_R,mean_integral,se_integral,var_integral,isometry"]
        for steps in ladder:
            res = decomposition_check(lq, s, eta, m, steps, seed)
            lines.append(
                f"{_fmt(res['dt'])},{_fmt(res['mean_R'])},{_fmt(res['se_R'])},"
                f"{_fmt(res['mean_integral'])},{_fmt(res['se_integral'])},"
                f"{_fmt(res['var_integral'])},{_fmt(res['isometry_quadrature'])}"
            )
        _write(out_dir, "decomposition.csv", "\n".join(lines) + "\n")
        return EXIT_OK
    raise ConfigError(f"unknown kolmo mode {mode!r}")


def run_selftest(cfg, out_dir):
    rng = np.random.default_rng(_get(cfg, "run.seed"))
    checks = []

    mat = rng.standard_normal((8, 8))
    tr, l1, ok = trace_and_bounds(mat)
    checks.append(("trace_bounds", ok))
    checks.append(("hs_identity", hs_identity_check(mat) <= 1e-10 * (mat ** 2).sum()))

    x, y, a, b = (rng.standard_normal(6) for _ in range(4))
    lhs = pairing_trace(tensor_operator(rank_one_tensor([x], [y])),
                        functional_operator(rank_one_tensor([a], [b])))
    checks.append(("rank_one_pairing", abs(lhs - (a @ x) * (b @ y)) <= 1e-12))

    space = GalerkinSpace.heat(6)
    qphi = martingale_bracket_Q_phi(np.eye(6), space)
    checks.append(("bracket_psd", bool(np.all(np.linalg.eigvalsh(qphi) >= -1e-14))))

    grid = Grid(T=1.0, n=512)
    schedule = EpsSchedule.for_grid(grid, (16, 8, 4, 2))
    paths = ensemble(ProcessSpec.brownian(1.0), grid, 50, _get(cfg, "run.seed")).matrix()
    from .regcalc import qv_ensemble
    series = qv_ensemble(paths, grid, schedule, 1.0)
    checks.append(("brownian_qv", abs(series.extrapolated - 1.0) <= 0.15))

    lq = LinearQuadraticSolution(space=GalerkinSpace.ou(4), sigma_bar=np.eye(4),
                                 G=np.eye(4), c=np.zeros(4))
    eta = np.full(4, 0.5)
    res = kolmogorov_mc(lq.problem(0.5, eta), 4000, _get(cfg, "run.seed"), n_steps=128)
    oracle = lq.value(0.5, eta)
    checks.append(("kolmo_oracle", abs(res["value"] - oracle) <= 6 * res["stderr"] + 0.01))

    lines = ["check,ok"]
    failed = 0
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        lines.append(f"{name},{str(bool(ok)).lower()}")
        failed += 0 if ok else 1
    _write(out_dir, "selftest.csv", "\n".join(lines) + "\n")
    if failed:
        raise NumericalFailure(f"{failed} selftest checks failed")
    return EXIT_OK


RUNNERS: Dict[str, Callable] = {
    "simulate": run_simulate,
    "qv": run_qv,
    "forward": run_forward,
    "window-qv": run_window_qv,
    "ito-check": run_ito_check,
    "replicate": run_replicate,
    "kolmo": run_kolmo,
    "selftest": run_selftest,
}


def execute(cfg: Dict[str, str]) -> int:
    out_dir = cfg["run.out"]
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(cfg, out_dir)
    plotting.emit_plot_script(out_dir)
    code = RUNNERS[cfg["run.subcommand"]](cfg, out_dir)
    if _bool(cfg, "run.figures"):
        plotting.render_all(out_dir)
    return code


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_FLAG_TO_KEY = {
    "process": "process.spec",
    "n": "grid.n",
    "horizon": "grid.horizon",
    "paths": "sim.paths",
    "eps_ladder": "eps.ladder",
    "t": None,  # resolved per subcommand below
    "integrand": "forward.integrand",
    "improper": "forward.improper",
    "measure": "measure.spec",
    "qv_sigma": "window.qv_sigma",
    "functional": "ito.functional",
    "payoff": "replicate.payoff",
    "sigma": "replicate.sigma",
    "models": "replicate.models",
    "dim": "kolmo.dim",
    "a": "kolmo.a",
    "q": "kolmo.q",
    "coeffs": "kolmo.coeffs",
    "g": "kolmo.g",
    "s": "kolmo.s",
    "eta": "kolmo.eta",
    "steps": "kolmo.steps",
    "mode": "kolmo.mode",
    "dt_ladder": "kolmo.dt_ladder",
}

_T_KEY = {"qv": "qv.t", "forward": "forward.t", "window-qv": "window.t"}


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--out", default=None)
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regvar",
        description="Regularization estimators, window quadratic variation, "
                    "robust replication and Galerkin Kolmogorov runs.",
    )
    subs = parser.add_subparsers(dest="subcommand")

    def sub(name, **kwargs):
        p = subs.add_parser(name, **kwargs)
        _add_common(p)
        return p

    p = sub("simulate", help="dump sample paths")
    p.add_argument("--process"); p.add_argument("--n"); p.add_argument("--horizon")
    p.add_argument("--paths")

    p = sub("qv", help="quadratic variation ladder")
    p.add_argument("--process"); p.add_argument("--n"); p.add_argument("--horizon")
    p.add_argument("--paths"); p.add_argument("--eps-ladder", dest="eps_ladder")
    p.add_argument("--t")

    p = sub("forward", help="forward integrals")
    p.add_argument("--process"); p.add_argument("--n"); p.add_argument("--horizon")
    p.add_argument("--paths"); p.add_argument("--eps-ladder", dest="eps_ladder")
    p.add_argument("--t"); p.add_argument("--integrand")
    p.add_argument("--improper")

    p = sub("window-qv", help="window-process quadratic variation against a measure")
    p.add_argument("--process"); p.add_argument("--n"); p.add_argument("--horizon")
    p.add_argument("--paths"); p.add_argument("--eps-ladder", dest="eps_ladder")
    p.add_argument("--t"); p.add_argument("--measure")
    p.add_argument("--qv-sigma", dest="qv_sigma")

    p = sub("ito-check", help="change-of-variable residual ladders")
    p.add_argument("--functional"); p.add_argument("--process")
    p.add_argument("--n"); p.add_argument("--horizon"); p.add_argument("--paths")
    p.add_argument("--eps-ladder", dest="eps_ladder")

    p = sub("replicate", help="robust replication across the model zoo")
    p.add_argument("--payoff"); p.add_argument("--sigma"); p.add_argument("--models")
    p.add_argument("--n"); p.add_argument("--horizon"); p.add_argument("--paths")
    p.add_argument("--eps-ladder", dest="eps_ladder")

    p = sub("kolmo", help="Kolmogorov Monte Carlo / decomposition runs")
    for flag in ("--dim", "--a", "--q", "--coeffs", "--g", "--s", "--eta",
                 "--steps", "--mode", "--paths"):
        p.add_argument(flag)
    p.add_argument("--dt-ladder", dest="dt_ladder")
    p.add_argument("--sigma-scale", dest="sigma_scale")

    sub("selftest", help="fast closed-form sanity checks")

    p = subs.add_parser("run", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true")
    return parser


def _overrides_from_args(args, subcommand: str) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    if args.config:
        overrides.update(read_manifest(args.config))
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "t":
            key = _T_KEY.get(subcommand)
            if key is None:
                raise ConfigError(f"--t is not valid for {subcommand!r}")
        overrides[key] = str(value)
    if getattr(args, "sigma_scale", None) is not None:
        overrides["kolmo.sigma_scale"] = str(args.sigma_scale)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    if args.out is not None:
        overrides["run.out"] = args.out
    if args.no_figures:
        overrides["run.figures"] = "false"
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        if args.subcommand == "run":
            stored = read_manifest(args.manifest)
            if "run.subcommand" not in stored:
                raise ConfigError("missing required key 'run.subcommand'")
            subcommand = stored.pop("run.subcommand")
            cfg = resolve_config(subcommand, stored)
            if args.out is not None:
                cfg["run.out"] = args.out
            if args.no_figures:
                cfg["run.figures"] = "false"
        else:
            overrides = _overrides_from_args(args, args.subcommand)
            cfg = resolve_config(args.subcommand, overrides)
        return execute(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
