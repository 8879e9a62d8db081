"""Config ingestion, accuracy sweeps, slope fits and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .expansion import ExpansionBundle, approx_value, zeroth_strategy
from .model import ModelError, instantiate_model
from .montecarlo import SimConfig, estimate_value, simulate_paths, standard_error
from .oracle import solve_distortion
from .subsuper import GridVerifier, VerificationError, calibrate_constants, default_grid
from .utility import UtilityError, make_utility

DIGITS = 12
# errors below this (relative) are rounding in the matrix exponential, not signal
ZERO_ERROR = 1e-12


class ConfigError(ValueError):
    pass


def fmt(v) -> str:
    return f"{v:.{DIGITS}g}"


def _round(v):
    if isinstance(v, float):
        return float(fmt(v)) if math.isfinite(v) else None
    if isinstance(v, dict):
        return {k: _round(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_round(x) for x in v]
    return v


def dumps(obj) -> str:
    return json.dumps(_round(obj), sort_keys=True, indent=2) + "\n"


# ----------------------------------------------------------------- config ---

def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def build_model(cfg: dict):
    try:
        return instantiate_model(cfg.get("model", {})), make_utility(cfg.get("utility", {}))
    except (ModelError, UtilityError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class SweepConfig:
    ladder: list
    delta_rule: str = "equal"
    delta_value: float = 0.0
    oracle: str = "distortion"
    point: tuple = (0.0, 1.0, None, None)
    mc: dict = field(default_factory=dict)
    slope_band: tuple | None = None

    def __post_init__(self):
        lad = [float(e) for e in self.ladder]
        if any(b >= a for a, b in zip(lad, lad[1:])):
            raise ConfigError("ladder must be strictly decreasing")
        if self.delta_rule not in ("equal", "zero", "fixed", "scaled"):
            raise ConfigError("delta_rule must be equal, zero, fixed or scaled")
        if self.oracle not in ("distortion", "monte-carlo"):
            raise ConfigError("oracle must be distortion or monte-carlo")
        self.ladder = lad

    def delta_for(self, eps: float) -> float:
        return {"equal": eps, "zero": 0.0, "fixed": self.delta_value,
                "scaled": self.delta_value * eps}[self.delta_rule]


def sweep_config(cfg: dict) -> SweepConfig:
    s = dict(cfg.get("sweep", {}))
    try:
        point = tuple(s.get("point", (0.0, 1.0, None, None)))
        band = s.get("slope_band")
        return SweepConfig(s.get("ladder", [0.32, 0.16, 0.08, 0.04, 0.02]),
                           s.get("delta_rule", "equal"), float(s.get("delta", 0.0)),
                           s.get("oracle", "distortion"), point, dict(cfg.get("mc", {})),
                           tuple(band) if band else None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def sim_config(mc: dict, x0: float = 1.0, y0=None, z0=None, **over) -> SimConfig:
    merged = {**mc, **{k: v for k, v in over.items() if v is not None}}
    try:
        return SimConfig(int(merged.get("paths", 100000)), int(merged.get("steps", 400)),
                         int(merged.get("seed", 0)), bool(merged.get("antithetic", True)),
                         float(merged.get("x0", x0)), y0, z0, merged.get("scheme", "implicit"))
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------------- sweeps ---

@dataclass
class SweepRow:
    eps: float
    delta: float
    v_tilde: float
    oracle: float | None
    error: float | None
    mc_mean: float | None = None
    mc_ci: float | None = None
    mc_se: float | None = None
    converged: bool = True


@dataclass
class AccuracyReport:
    rows: list
    slope: float | None
    slope_se: float | None
    flag: str
    oracle: str
    point: list

    def to_dict(self) -> dict:
        return _round({"rows": [asdict(r) for r in self.rows], "slope": self.slope,
                       "slope_se": self.slope_se, "flag": self.flag, "oracle": self.oracle,
                       "point": list(self.point)})

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyReport":
        return cls([SweepRow(**r) for r in d["rows"]], d["slope"], d["slope_se"], d["flag"],
                   d["oracle"], d["point"])


def fit_slope(x, y):
    """Least-squares slope of ``log y`` on ``log x`` and its standard error."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    n = len(lx)
    if n < 2:
        raise ValueError("need at least two points")
    X = np.vstack([lx, np.ones(n)]).T
    coef, *_ = np.linalg.lstsq(X, ly, rcond=None)
    if n <= 2:
        return float(coef[0]), 0.0
    resid = ly - X @ coef
    s2 = float(resid @ resid) / (n - 2)
    se = math.sqrt(s2 / float(np.sum((lx - lx.mean()) ** 2)))
    return float(coef[0]), se


def run_sweep(cfg: dict) -> AccuracyReport:
    spec0, utility = build_model(cfg)
    sc = sweep_config(cfg)
    t0, x0, y0, z0 = sc.point
    y0 = spec0.y_mean if y0 is None else float(y0)
    z0 = spec0.z_mean if z0 is None else float(z0)
    if sc.oracle == "distortion" and not (utility.family == "power" and utility.is_power):
        raise ConfigError("distortion oracle needs power utility")
    rows = []
    for eps in sc.ladder:
        delta = sc.delta_for(eps)
        spec = spec0.with_scales(eps, delta)
        bundle = ExpansionBundle(spec, utility)
        vt = float(approx_value(bundle, t0, x0, z0, eps, delta))
        if sc.oracle == "distortion":
            if delta != 0:
                raise ConfigError("distortion oracle needs delta = 0")
            field_ = solve_distortion(utility.gamma, spec, eps, z=z0)
            ov = float(field_.value(t0, x0, y0))
            rows.append(SweepRow(eps, delta, vt, ov, abs(ov - vt)))
        else:
            stats = simulate_paths(spec, zeroth_strategy(bundle),
                                   sim_config(sc.mc, x0, y0, z0), utility)
            m, h = estimate_value(stats)
            rows.append(SweepRow(eps, delta, vt, m, abs(m - vt), m, h, standard_error(stats)))
    good = [r for r in rows if r.converged and r.error is not None]
    if good and all(r.error <= ZERO_ERROR * max(1.0, abs(r.v_tilde)) for r in good):
        return AccuracyReport(rows, None, None, "degenerate: zero error", sc.oracle,
                              [t0, x0, y0, z0])
    if len(good) < 2:
        return AccuracyReport(rows, None, None, "insufficient rows", sc.oracle, [t0, x0, y0, z0])
    slope, se = fit_slope([r.eps + r.delta for r in good], [r.error for r in good])
    return AccuracyReport(rows, slope, se, "ok", sc.oracle, [t0, x0, y0, z0])


CSV_FIELDS = ("eps", "delta", "v_tilde", "oracle", "error", "mc_mean", "mc_ci", "mc_se",
              "converged")


def report_csv(report: AccuracyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.rows:
        d = asdict(r)
        w.writerow(["" if d[k] is None else (fmt(d[k]) if isinstance(d[k], float) else d[k])
                    for k in CSV_FIELDS])
    return buf.getvalue()


def emit_report(report: AccuracyReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json", "loglog": out / "loglog.dat"}
    paths["csv"].write_text(report_csv(report))
    paths["json"].write_text(dumps(report.to_dict()))
    lines = [f"{fmt(math.log(r.eps + r.delta))} {fmt(math.log(r.error))}\n"
             for r in report.rows if r.error and r.error > 0]
    paths["loglog"].write_text("".join(lines))
    return paths


# -------------------------------------------------------- verification run ---

def verify_subsuper(cfg: dict) -> dict:
    spec, utility = build_model(cfg)
    v = dict(cfg.get("verify", {}))
    eps = float(v.get("eps", spec.eps))
    delta = float(v.get("delta", spec.delta))
    spec = spec.with_scales(eps, delta)
    bundle = ExpansionBundle(spec, utility)
    grid = default_grid(spec, int(v.get("n_x", 9)), int(v.get("n_y", 9)), int(v.get("n_z", 9)))
    verifier = GridVerifier(bundle, grid)
    try:
        cal = calibrate_constants(verifier, eps, delta, float(v.get("cap", 2.0**20)))
    except VerificationError as exc:
        return {"passed": False, "diagnostic": str(exc), "eps": eps, "delta": delta}
    rep = cal.report
    return {"passed": True, "eps": eps, "delta": delta, "C_A": cal.constants[0],
            "C_B": cal.constants[1], "C_C": cal.constants[2], "binding": cal.binding,
            "min_q_sub": rep["min_q_sub"], "max_q_super": rep["max_q_super"],
            "terminal_sub": rep["terminal_sub"], "terminal_super": rep["terminal_super"],
            "concavity_margin": -rep["max_vxx_super"], "min_sandwich": rep["min_sandwich"],
            "max_spread": rep["max_spread"]}


def simulate(cfg: dict, paths: int | None = None, seed: int | None = None) -> dict:
    spec, utility = build_model(cfg)
    mc = dict(cfg.get("mc", {}))
    sc = sim_config(mc, paths=paths, seed=seed)
    bundle = ExpansionBundle(spec, utility)
    stats = simulate_paths(spec, zeroth_strategy(bundle), sc, utility)
    m, h = estimate_value(stats)
    return {"mean": m, "ci": [m - h, m + h], "n_paths": sc.n_paths, "n_steps": sc.n_steps,
            "seed": sc.seed}
