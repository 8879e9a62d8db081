"""``mm`` command line: sweep, verify-subsuper, simulate, merton."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness
from .merton import MertonError, solve_merton
from .utility import UtilityError, make_utility

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mm", description="Multiscale Merton approximation tools")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("sweep", help="accuracy sweep over an eps ladder")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    v = sub.add_parser("verify-subsuper", help="calibrate and verify sub/super-solutions")
    v.add_argument("--config", required=True)
    m = sub.add_parser("simulate", help="Monte Carlo value of the zeroth-order strategy")
    m.add_argument("--config", required=True)
    m.add_argument("--paths", type=int)
    m.add_argument("--seed", type=int)
    c = sub.add_parser("merton", help="closed-form Merton value for power utility")
    c.add_argument("--gamma", type=float, required=True)
    c.add_argument("--lambda", dest="lam", type=float, required=True)
    c.add_argument("--T", type=float, required=True)
    c.add_argument("--t", type=float, default=0.0)
    c.add_argument("--x", type=float, nargs="+", default=[1.0])
    return p


def _sweep(args) -> int:
    cfg = harness.load_config(args.config)
    report = harness.run_sweep(cfg)
    harness.emit_report(report, args.out)
    sys.stdout.write(harness.report_csv(report))
    summary = {"slope": report.slope, "slope_se": report.slope_se, "flag": report.flag}
    sys.stdout.write(harness.dumps(summary))
    band = harness.sweep_config(cfg).slope_band
    if band and (report.slope is None or not band[0] <= report.slope <= band[1]):
        return EXIT_FAIL
    return EXIT_OK


def _verify(args) -> int:
    rep = harness.verify_subsuper(harness.load_config(args.config))
    sys.stdout.write(harness.dumps(rep))
    return EXIT_OK if rep["passed"] else EXIT_FAIL


def _simulate(args) -> int:
    rep = harness.simulate(harness.load_config(args.config), args.paths, args.seed)
    sys.stdout.write(harness.dumps(rep))
    return EXIT_OK


def _merton(args) -> int:
    if args.T <= 0 or not 0 <= args.t <= args.T:
        raise harness.ConfigError("need T > 0 and 0 <= t <= T")
    if any(x <= 0 for x in args.x):
        raise harness.ConfigError("wealth must be positive")
    if args.gamma == 1.0:
        u = make_utility(family="log")
    else:
        u = make_utility(family="power", gamma=args.gamma)
    field = solve_merton(u, args.lam, args.T)
    xs = np.asarray(args.x, float)
    p = field.partials(args.t, xs)
    out = {"gamma": args.gamma, "lambda": args.lam, "T": args.T, "t": args.t,
           "x": xs.tolist(), "value": p["M"].tolist(), "value_x": p["x"].tolist(),
           "risk_tolerance": field.R(args.t, xs).tolist(),
           "merton_fraction": (field.R(args.t, xs) / xs).tolist()}
    sys.stdout.write(harness.dumps(out))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"sweep": _sweep, "verify-subsuper": _verify, "simulate": _simulate,
               "merton": _merton}[args.command]
    try:
        return handler(args)
    except (harness.ConfigError, UtilityError, MertonError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
