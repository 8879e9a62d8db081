"""Path simulation of the factor system and wealth under a Markov strategy.

Paths are generated in blocks of ``BLOCK`` with a Philox stream keyed by
``(seed, block index)``, so results do not depend on how blocks are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expansion import StrategyField
from .model import ModelSpec
from .utility import UtilitySpec

BLOCK = 2**14


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    n_steps: int
    seed: int = 0
    antithetic: bool = False
    x0: float = 1.0
    y0: float | None = None
    z0: float | None = None
    fast_scheme: str = "auto"

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1 or not self.x0 > 0:
            raise SimulationError("need n_paths >= 1, n_steps >= 1, x0 > 0")
        if self.antithetic and self.n_paths % 2:
            raise SimulationError("antithetic sampling needs an even path count")
        if self.fast_scheme not in ("auto", "explicit", "implicit"):
            raise SimulationError("fast_scheme must be auto, explicit or implicit")


@dataclass(frozen=True)
class PathStats:
    mean: float
    variance: float
    n_effective: int
    quantiles: tuple
    positivity_violations: int
    proxy_exposure: float
    proxy_d1v0: float
    n_paths: int
    n_steps: int
    seed: int
    antithetic: bool


def _block_normals(seed: int, block: int, n: int, steps: int, antithetic: bool):
    gen = np.random.Generator(np.random.Philox(key=[seed, block]))
    if antithetic:
        half = gen.standard_normal((steps, 3, n // 2))
        return np.concatenate([half, -half], axis=2)
    return gen.standard_normal((steps, 3, n))


def _implicit(spec: ModelSpec, dt: float, eps: float, scheme: str) -> bool:
    if scheme == "auto":
        return eps < dt / 10
    return scheme == "implicit"


def _simulate_block(spec, strategy, cfg, block, n, chol, y0, z0):
    T, M = spec.T, cfg.n_steps
    dt = T / M
    eps, delta = spec.eps, spec.delta
    sq = math.sqrt(dt)
    normals = _block_normals(cfg.seed, block, n, M, cfg.antithetic)
    logx = np.full(n, math.log(cfg.x0))
    x = np.full(n, cfg.x0)
    y = np.full(n, y0)
    z = np.full(n, z0)
    bad = np.zeros(n, dtype=bool)
    p_exp = np.zeros(n)
    p_d1 = np.zeros(n)
    implicit = _implicit(spec, dt, eps, cfg.fast_scheme)
    b_y = float(spec.b_y(0.0))
    for i in range(M):
        t = i * dt
        dw = chol @ normals[i] * sq
        lam = spec.lam(y, z)
        cur_x = np.exp(logx) if strategy.proportional else x
        expo = strategy.exposure(t, cur_x, y, z)
        if strategy.state is not None:
            R, vx = strategy.state(t, cur_x, z)
            p_exp += (expo * vx) ** 2 * dt
            p_d1 += (R * vx) ** 2 * dt
        if strategy.proportional:
            f = expo / cur_x
            logx = logx + (f * lam - 0.5 * f**2) * dt + f * dw[0]
        else:
            x = x + expo * (lam * dt + dw[0])
            bad |= x <= 0
            x = np.where(x <= 0, 0.0, x)
        if implicit:
            # trapezoidal drift split keeps the invariant law of a linear drift exact
            r = 0.5 * b_y * dt / eps
            y = (y + (spec.b(y) - 0.5 * b_y * y) * dt / eps
                 + spec.a(y) / math.sqrt(eps) * dw[1]) / (1.0 - r)
        else:
            y = y + spec.b(y) * dt / eps + spec.a(y) / math.sqrt(eps) * dw[1]
        if delta > 0:
            z = z + delta * spec.c(z) * dt + math.sqrt(delta) * spec.g(z) * dw[2]
        if not (np.all(np.isfinite(logx)) and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise SimulationError("non-finite state encountered")
    xT = np.exp(logx) if strategy.proportional else np.where(bad, np.nan, x)
    return xT, int(bad.sum()), p_exp, p_d1


def simulate_paths(spec: ModelSpec, strategy: StrategyField, cfg: SimConfig,
                   utility: UtilitySpec) -> PathStats:
    rep = np.linalg.cholesky(spec.correlations.matrix())
    y0 = spec.y_mean if cfg.y0 is None else cfg.y0
    z0 = spec.z_mean if cfg.z0 is None else cfg.z0
    n_blocks = -(-cfg.n_paths // BLOCK)
    eff, viol, pe, pd = [], 0, [], []
    for blk in range(n_blocks):
        n = min(BLOCK, cfg.n_paths - blk * BLOCK)
        xT, v, p_exp, p_d1 = _simulate_block(spec, strategy, cfg, blk, n, rep, y0, z0)
        viol += v
        ok = np.isfinite(xT) & (xT > 0)
        u = np.full(n, np.nan)
        u[ok] = utility.U(xT[ok])
        if cfg.antithetic:
            u = 0.5 * (u[: n // 2] + u[n // 2:])
        eff.append(u)
        pe.append(p_exp)
        pd.append(p_d1)
    samples = np.concatenate(eff)
    samples = samples[np.isfinite(samples)]
    if samples.size == 0:
        raise SimulationError("no valid terminal samples")
    # shifted by the first sample: exact for a degenerate law, less cancellation otherwise
    shift = samples[0]
    dev = samples - shift
    mean = float(shift + np.sum(dev) / samples.size)
    var = float(np.sum((samples - mean) ** 2) / max(samples.size - 1, 1))
    q = tuple(float(v) for v in np.quantile(samples, [0.05, 0.25, 0.5, 0.75, 0.95]))
    pe, pd = np.concatenate(pe), np.concatenate(pd)
    return PathStats(mean, var, int(samples.size), q, viol, float(np.mean(pe)), float(np.mean(pd)),
                     cfg.n_paths, cfg.n_steps, cfg.seed, cfg.antithetic)


def estimate_value(stats: PathStats, utility: UtilitySpec | None = None):
    """Sample mean of ``U(X_T)`` and the half-width of its 95% normal CI."""
    if stats.n_effective < 30:
        raise SimulationError("fewer than 30 effective samples: CI refused")
    half = 1.959963984540054 * math.sqrt(stats.variance / stats.n_effective)
    return stats.mean, half


def standard_error(stats: PathStats) -> float:
    return math.sqrt(stats.variance / stats.n_effective)
