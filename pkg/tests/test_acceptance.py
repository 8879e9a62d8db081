"""Acceptance checks, one per criterion.

Each check prints a single ``criterion N: PASS|FAIL`` line (past pytest's
output capture) and then asserts.  Run ``python tests/test_acceptance.py`` for the
summary alone.
"""

import contextlib
import functools
import io
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from msmerton import expansion as X
from msmerton import harness as Hn
from msmerton import merton as mt
from msmerton import montecarlo as MC
from msmerton import subsuper as S
from msmerton.averaging import THETA_NAMES, theta_family
from msmerton.cli import main
from msmerton.model import instantiate_model
from msmerton.utility import make_utility

LADDER = [0.32, 0.16, 0.08, 0.04, 0.02]
RATE_MODEL = dict(catalog="ou_tanh", lam0=0.3, lam_y=0.2, rho1=-0.5)
TWO_FACTOR = dict(rho1=-0.4, rho2=0.3, rho12=0.2, lam_z=0.1, eps=0.01, delta=0.01)
POWER2 = dict(family="power", gamma=2.0)

SLOPE_BAND = (0.85, 1.15)
RATE_SECONDS = 120.0
MC_PATHS, MC_STEPS, MC_SEED = 100_000, 400, 7
MC_SECONDS = 300.0
Q_TOL, TERMINAL_TOL = 1e-8, 1e-10
CONCAVITY_MARGIN = 1e-6
SANDWICH_RATIO = 2.0
VEGA_TOL, POISSON_TOL, MEAN_TOL = 1e-6, 1e-8, 1e-10
H_RELATION_TOL, MERTON_EXACT_TOL, MERTON_H_TOL = 1e-4, 1e-12, 1e-4


def _say(n, ok, detail):
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    return ok


# -------------------------------------------------------------- 1. rate ---

def criterion_1():
    cfg = {"model": RATE_MODEL, "utility": POWER2,
           "sweep": {"ladder": LADDER, "delta_rule": "zero", "oracle": "distortion",
                     "point": [0.0, 1.0, 0.0, 0.0]}}
    t0 = time.perf_counter()
    rep = Hn.run_sweep(cfg)
    secs = time.perf_counter() - t0
    ok = rep.slope is not None and SLOPE_BAND[0] <= rep.slope <= SLOPE_BAND[1] and secs < RATE_SECONDS
    errs = " ".join(f"{r.error:.3e}" for r in rep.rows)
    return ok, f"slope={rep.slope:.4f}+/-{rep.slope_se:.4f} errors=[{errs}] time={secs:.1f}s"


# ------------------------------------------------------- 2. Monte Carlo ---

def criterion_2():
    u = make_utility(POWER2)
    base = instantiate_model(RATE_MODEL)
    t0 = time.perf_counter()
    gaps, halves, ses, v0 = [], [], [], None
    for eps in LADDER:
        spec = base.with_scales(eps=eps, delta=0.0)
        bundle = X.ExpansionBundle(spec, u)
        cfg = MC.SimConfig(MC_PATHS, MC_STEPS, MC_SEED, antithetic=True, x0=1.0, y0=0.0, z0=0.0,
                           fast_scheme="implicit")
        stats = MC.simulate_paths(spec, X.zeroth_strategy(bundle), cfg, u)
        mean, half = MC.estimate_value(stats)
        vt = float(X.approx_value(bundle, 0.0, 1.0, 0.0, eps, 0.0))
        v0 = float(bundle.merton(0.0).M(0.0, 1.0))
        gaps.append(abs(mean - vt))
        halves.append(half)
        ses.append(MC.standard_error(stats))
    secs = time.perf_counter() - t0
    monotone = all(g1 <= g0 + h0 + h1 for g0, g1, h0, h1
                   in zip(gaps, gaps[1:], halves, halves[1:])) and gaps[-1] < gaps[0]
    small = gaps[-1] < 3 * ses[-1] + 0.05 * abs(v0)
    ok = monotone and small and secs < MC_SECONDS
    g = " ".join(f"{x:.2e}" for x in gaps)
    return ok, (f"|MC-V~|=[{g}] ci~{halves[-1]:.1e} bound@0.02={3 * ses[-1] + 0.05 * abs(v0):.3e}"
                f" time={secs:.0f}s")


# --------------------------------------------- 3-5. sub/super-solutions ---

@functools.lru_cache(maxsize=None)
def _verifier():
    spec = instantiate_model(TWO_FACTOR)
    bundle = X.ExpansionBundle(spec, make_utility(POWER2))
    return S.GridVerifier(bundle, S.default_grid(spec))


@functools.lru_cache(maxsize=None)
def _calibration(eps):
    return S.calibrate_constants(_verifier(), eps, eps)


def criterion_3():
    rep = _calibration(0.01).report
    ok = rep["min_q_sub"] >= -Q_TOL and rep["terminal_sub"] >= -TERMINAL_TOL
    return ok, (f"C={_calibration(0.01).constants[0]:g} min Q[V-]={rep['min_q_sub']:.3e}"
                f" min U-V-(T)={rep['terminal_sub']:.3e}")


def criterion_4():
    rep = _calibration(0.01).report
    ok = (rep["max_q_super"] <= Q_TOL and rep["max_vxx_super"] < -CONCAVITY_MARGIN
          and rep["terminal_super"] >= -TERMINAL_TOL and rep["min_sandwich"] >= 0)
    return ok, (f"max Qhat[V+]={rep['max_q_super']:.3e} max V+_xx={rep['max_vxx_super']:.3e}"
                f" min V+(T)-U={rep['terminal_super']:.3e} min V+-V-={rep['min_sandwich']:.3e}")


def criterion_5():
    spreads = [_calibration(e).report["max_spread"] for e in (0.04, 0.02, 0.01)]
    ok = max(spreads) / min(spreads) < SANDWICH_RATIO
    return ok, "max (V+-V-)/(eps+delta) = [" + " ".join(f"{s:.4f}" for s in spreads) + "]"


# -------------------------------------------------------- 6. identities ---

def criterion_6():
    spec = instantiate_model(TWO_FACTOR)
    bundle = X.ExpansionBundle(spec, make_utility(POWER2))
    ts, xs = np.linspace(0.0, 0.99, 6), np.logspace(-1, 1, 9)
    vega = X.vega_gamma_residual(bundle, np.linspace(-1.5, 1.5, 5), ts, xs)
    vega_worst = max(vega.values())

    pois, mean = 0.0, 0.0
    for z in (-1.0, 0.0, 1.0):
        tb = theta_family(spec, z)
        for name in THETA_NAMES:
            pois = max(pois, tb[name].residual(4.0, spec.y_mean, spec.y_std))
            mean = max(mean, abs(tb.density.grid_average(tb[name].theta)))

    mix = make_utility(family="mixture", weights=[0.5, 0.5], gammas=[1.5, 3.0])
    lam, T = 0.5, 1.0
    hf = mt.solve_h_transform(mix, lam, T, mt.HeatGrid())
    exact_mix = mt.solve_merton(mix, lam, T, method="kernel")
    relation, h_res = 0.0, 0.0
    for t in (0.0, 0.3, 0.7):
        xi = hf.inverse(xs, t)
        mx = exact_mix.partials(t, hf(t, xi))["x"]
        relation = max(relation, float(np.max(np.abs(mx / np.exp(-xi - 0.5 * lam**2 * (T - t)) - 1))))
        h_res = max(h_res, float(np.max(np.abs(mt.merton_residual(mt.GridMertonField(hf, mix), t, xs)))))

    closed = 0.0
    for u in (make_utility(POWER2), make_utility(family="power", gamma=0.5), make_utility(family="log")):
        f = mt.solve_merton(u, lam, T)
        for t in ts:
            closed = max(closed, float(np.max(np.abs(mt.merton_residual(f, t, xs)))))

    ok = (vega_worst < VEGA_TOL and pois < POISSON_TOL and mean < MEAN_TOL
          and relation < H_RELATION_TOL and closed < MERTON_EXACT_TOL and h_res < MERTON_H_TOL)
    return ok, (f"vega={vega_worst:.1e} poisson={pois:.1e} <theta>={mean:.1e} H-relation={relation:.1e}"
                f" merton closed={closed:.1e} H-path={h_res:.1e}")


# -------------------------------------------------- 7. trivial collapse ---

def criterion_7():
    u = make_utility(POWER2)
    spec = instantiate_model(dict(lam_y=0.0, rho1=-0.5, rho2=0.3, rho12=0.2, delta=0.01))
    bundle = X.ExpansionBundle(spec, u)
    tt, xx = np.meshgrid(np.linspace(0, 0.99, 5), np.logspace(-1, 1, 5), indexing="ij")
    ys = np.linspace(-3, 3, 7)
    f, tb = bundle.merton(0.0), bundle.thetas(0.0)
    parts = [X.first_order_fast(f, tb, spec.rho1, tt, xx),
             X.first_order_slow(f, tb, spec.rho2, 0.5, tt, xx), *X.w_terms(f, tb, spec, tt, xx, ys)]
    slab = S.build_slab(bundle, tt, xx, ys, 0.0)
    parts += [v for (label, *_), p in slab.groups.items() if label in ("F", "G", "H")
              for v in p.values()]
    zero_terms = all(np.all(np.asarray(p) == 0) for p in parts)
    exact_v = X.approx_value(bundle, 0.0, 1.0, 0.0, 0.04, 0.01) == f.M(0.0, 1.0)

    still = instantiate_model(dict(lam0=0.0, lam_y=0.0, rho1=-0.5))
    stats = MC.simulate_paths(still, X.zeroth_strategy(X.ExpansionBundle(still, u)),
                              MC.SimConfig(10_000, 50, seed=1, x0=1.3), u)
    mc_exact = stats.mean == float(u.U(1.3)) and stats.variance == 0.0
    ok = zero_terms and exact_v and mc_exact
    return ok, f"corrections zero={zero_terms} V~=v0 exactly={exact_v} MC=U(x0) exactly={mc_exact}"


# ------------------------------------------------------- 8. determinism ---

_CFG = """
[model]
rho1 = -0.4
rho2 = 0.3
rho12 = 0.2
lam_z = 0.1
[utility]
family = "power"
gamma = 2.0
[sweep]
ladder = [0.32, 0.08, 0.02]
delta_rule = "zero"
oracle = "distortion"
point = [0.0, 1.0, 0.0, 0.0]
[verify]
eps = 0.01
delta = 0.01
n_x = 5
n_y = 5
n_z = 3
[mc]
paths = 20000
steps = 100
"""


def _run_cli(argv, out_dir=None):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    files = ()
    if out_dir is not None:
        files = tuple(p.read_bytes() for p in sorted(Path(out_dir).iterdir()))
    return code, buf.getvalue().encode(), files


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "cfg.toml"
        cfg.write_text(_CFG)
        commands = {
            "sweep": lambda k: (["sweep", "--config", str(cfg), "--out", f"{tmp}/out{k}"], f"{tmp}/out{k}"),
            "verify-subsuper": lambda k: (["verify-subsuper", "--config", str(cfg)], None),
            "simulate": lambda k: (["simulate", "--config", str(cfg), "--paths", "20000",
                                    "--seed", "42"], None),
            "merton": lambda k: (["merton", "--gamma", "2", "--lambda", "0.5", "--T", "1",
                                  "--x", "0.5", "1", "2"], None),
        }
        same = {}
        for name, make in commands.items():
            runs = [_run_cli(*make(k)) for k in (0, 1)]
            same[name] = runs[0] == runs[1] and runs[0][0] == 0 and bool(runs[0][1])
    ok = all(same.values())
    return ok, "byte-identical reruns: " + " ".join(f"{k}={v}" for k, v in same.items())


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8]


def _check(n, capsys):
    ok, detail = CRITERIA[n - 1]()
    with capsys.disabled():
        _say(n, ok, detail)
    assert ok, detail


def test_criterion_1_rate(capsys):
    _check(1, capsys)


def test_criterion_2_zeroth_strategy_monte_carlo(capsys):
    _check(2, capsys)


def test_criterion_3_sub_solution(capsys):
    _check(3, capsys)


def test_criterion_4_super_solution(capsys):
    _check(4, capsys)


def test_criterion_5_sandwich_order(capsys):
    _check(5, capsys)


def test_criterion_6_identity_suites(capsys):
    _check(6, capsys)


def test_criterion_7_trivial_collapse(capsys):
    _check(7, capsys)


def test_criterion_8_determinism(capsys):
    _check(8, capsys)


if __name__ == "__main__":
    results = []
    for i, crit in enumerate(CRITERIA, 1):
        ok, detail = crit()
        results.append(_say(i, ok, detail))
    sys.exit(0 if all(results) else 1)
