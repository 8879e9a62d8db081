"""Asymptotic value approximation and the term engine behind it.

Every piece of the expansion (and of the sub/super candidates) has the form

    weight * phi(y, z) * P(t, x; lam_bar(z))

where ``phi`` is a z-scalar times an optional centered Poisson solution and
``P`` is a ring element of the heat algebra evaluated at ``lam = lam_bar(z)``.
``(p, q)`` records the weight ``eps**(p/2) * delta**(q/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from . import algebra as A
from .averaging import ThetaBundle, invariant_density, sharpe_averages, theta_family
from .merton import MertonField, RiskToleranceTable, heat_env, kernel_for
from .model import ModelSpec
from .utility import UtilitySpec


class ExpansionError(ValueError):
    pass


# ring polynomials shared by the expansion and the correctors
D1M = A.D1(A.M)
D1SQ = A.D1(D1M)
D1CUBE = A.D1(D1SQ)
HD1 = A.hD(D1M)
HD2 = A.hD(D1SQ)
D1HD2 = A.D1(HD2)
TWO_T_MINUS_t = A.T + A.tau
P10 = A.tau * D1SQ
P01 = A.tau**2 * A.lam * D1SQ


@dataclass(frozen=True)
class SlowCoefficients:
    """z-level scalars entering the terms."""

    z: float
    lb: float
    lbp: float
    lbpp: float
    lh: float
    lhp: float
    B: float
    Bp: float
    g: float
    gz: float
    rho1: float
    rho2: float
    rho12: float

    @property
    def c10(self):
        return -0.5 * self.rho1 * self.B

    @property
    def c10p(self):
        return -0.5 * self.rho1 * self.Bp

    @property
    def c01(self):
        return 0.5 * self.rho2 * self.lh * self.lbp * self.g

    @property
    def c01p(self):
        return 0.5 * self.rho2 * (self.lhp * self.lbp * self.g + self.lh * self.lbpp * self.g
                                  + self.lh * self.lbp * self.gz)


def slow_coefficients(spec: ModelSpec, tb: ThetaBundle) -> SlowCoefficients:
    return SlowCoefficients(tb.z, tb.lam_bar, tb.lam_bar_p, tb.lam_bar_pp, tb.lam_hat,
                            tb.lam_hat_p, tb.B, tb.B_p, float(spec.g(tb.z)),
                            float(spec.g_z(tb.z)), spec.rho1, spec.rho2, spec.rho12)


@dataclass(frozen=True)
class Term:
    label: str
    order: tuple
    poly: object
    coef: Callable[[SlowCoefficients], float]
    theta: str | None = None
    constant: str | None = None


def _terms_v():
    return [
        Term("v0", (0, 0), A.M, lambda s: 1.0),
        Term("v10", (1, 0), P10, lambda s: s.c10),
        Term("v01", (0, 1), P01, lambda s: s.c01),
    ]


def _terms_w():
    return [
        Term("w20", (2, 0), D1M, lambda s: -0.5, "theta"),
        Term("w30", (3, 0), A.tau * HD2, lambda s: 0.5 * s.rho1 * s.B, "theta"),
        Term("w30", (3, 0), D1SQ, lambda s: 0.5 * s.rho1, "theta1"),
        Term("w21", (2, 1), A.tau**2 * A.lam * HD2,
             lambda s: -0.5 * s.rho2 * s.lh * s.lbp * s.g, "theta"),
        Term("w21", (2, 1), A.tau * A.lam * D1SQ, lambda s: -s.rho2 * s.g * s.lbp, "theta2"),
    ]


EXPANSION_TERMS = tuple(_terms_v() + _terms_w())


# ------------------------------------------------------------------ engine ---

PARTIAL_KEYS = ("", "t", "x", "xx", "y", "yy", "xy", "z", "zz", "xz", "yz")
_D1_STENCIL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2_STENCIL = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _zero_partials(shape):
    return {k: np.zeros(shape) for k in PARTIAL_KEYS}


def add_partials(acc: dict, part: dict, scale: float = 1.0) -> None:
    for k in PARTIAL_KEYS:
        acc[k] = acc[k] + scale * part[k]


class ExpansionBundle:
    """Evaluators of the expansion terms over ``(t, x, y, z)``.

    Theta bundles and Merton jets are cached per slow level; z-derivatives of
    the y-dependent factors come from a 5-point stencil with step ``h_z``.
    """

    def __init__(self, spec: ModelSpec, utility: UtilitySpec, h_z: float = 1e-2):
        self.spec = spec
        self.utility = utility
        self.h_z = h_z
        self.kernel = kernel_for(utility)
        self.density = invariant_density(spec)
        self._tb: dict = {}

    # cached slow-level data ------------------------------------------------
    def thetas(self, z: float) -> ThetaBundle:
        key = round(float(z), 12)
        if key not in self._tb:
            self._tb[key] = theta_family(self.spec, key, self.density)
        return self._tb[key]

    def slow(self, z: float) -> SlowCoefficients:
        return slow_coefficients(self.spec, self.thetas(z))

    def merton(self, z: float) -> MertonField:
        return MertonField(self.utility, self.thetas(z).lam_bar, self.spec.T, self.kernel)

    # y/z factor ------------------------------------------------------------
    def _phi_level(self, term: Term, y, z):
        s = self.slow(z)
        c = term.coef(s)
        if term.theta is None:
            one = np.ones_like(y)
            return c * one, 0.0 * one, 0.0 * one
        th = self.thetas(z)[term.theta]
        return c * th(y), c * th.d(y), c * th.d2(y)

    def phi(self, term: Term, y, z: float, z_derivs: bool = True) -> dict:
        y = np.asarray(y, float)
        f, fy, fyy = self._phi_level(term, y, z)
        out = {"": f, "y": fy, "yy": fyy}
        if not z_derivs:
            zero = np.zeros_like(y)
            out.update(z=zero, zz=zero, yz=zero)
            return out
        h = self.h_z
        levels = [self._phi_level(term, y, z + k * h) if k else (f, fy, fyy)
                  for k in (-2, -1, 0, 1, 2)]
        out["z"] = sum(w * lv[0] for w, lv in zip(_D1_STENCIL, levels)) / h
        out["zz"] = sum(w * lv[0] for w, lv in zip(_D2_STENCIL, levels)) / h**2
        out["yz"] = sum(w * lv[1] for w, lv in zip(_D1_STENCIL, levels)) / h
        return out

    # (t, x) factor ---------------------------------------------------------
    def env(self, t, x, z: float, nk: int):
        return heat_env(self.kernel, t, x, self.thetas(z).lam_bar, self.spec.T, nk)

    def poly_partials(self, poly, t, x, z: float, env=None) -> dict:
        js = A.jet(poly)
        if env is None:
            env = self.env(t, x, z, max(j.nk for j in js.values()) + 1)
        v = {k: js[k](env) for k in A.JET_KEYS}
        s = self.slow(z)
        return {"": v[""], "t": v["t"], "x": v["x"], "xx": v["xx"],
                "z": s.lbp * v["l"], "zz": s.lbpp * v["l"] + s.lbp**2 * v["ll"],
                "xz": s.lbp * v["xl"]}

    def term_partials(self, term: Term, t, x, y, z: float, z_derivs: bool = True,
                      env=None) -> dict:
        """Partials of ``phi * P`` with shape ``shape(t, x) + (len(y),)``."""
        P = {k: v[..., None] for k, v in self.poly_partials(term.poly, t, x, z, env).items()}
        ph = self.phi(term, y, z, z_derivs)
        return {
            "": ph[""] * P[""], "t": ph[""] * P["t"], "x": ph[""] * P["x"],
            "xx": ph[""] * P["xx"], "y": ph["y"] * P[""], "yy": ph["yy"] * P[""],
            "xy": ph["y"] * P["x"],
            "z": ph["z"] * P[""] + ph[""] * P["z"],
            "zz": ph["zz"] * P[""] + 2 * ph["z"] * P["z"] + ph[""] * P["zz"],
            "xz": ph["z"] * P["x"] + ph[""] * P["xz"],
            "yz": ph["yz"] * P[""] + ph["y"] * P["z"],
        }

    def nk_for(self, terms) -> int:
        return max(max(j.nk for j in A.jet(tm.poly).values()) for tm in terms) + 1

    def grouped_partials(self, terms, t, x, y, z: float, z_derivs: bool = True) -> dict:
        """Sum term partials by ``(label, order, constant)``."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        env = self.env(t, x, z, self.nk_for(terms))
        out: dict = {}
        shape = t.shape + (len(np.atleast_1d(y)),)
        for tm in terms:
            key = (tm.label, tm.order, tm.constant)
            acc = out.setdefault(key, _zero_partials(shape))
            add_partials(acc, self.term_partials(tm, t, x, np.atleast_1d(y), z, z_derivs, env))
        return out

    def value(self, label: str, t, x, y, z: float) -> np.ndarray:
        terms = [tm for tm in EXPANSION_TERMS if tm.label == label]
        if not terms:
            raise ExpansionError(f"unknown expansion term {label!r}")
        total = 0.0
        for p in self.grouped_partials(terms, t, x, y, z, z_derivs=False).values():
            total = total + p[""]
        return total


# ---------------------------------------------------------------- operations

def _scalar(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v


def first_order_fast(merton: MertonField, thetas: ThetaBundle, rho1: float, t, x):
    """``-(T - t) rho1 B / 2 * D1^2 v0``."""
    if thetas.B is None:
        raise ExpansionError("bundle carries no B")
    return _scalar(-0.5 * rho1 * thetas.B * merton.evaluate(P10, t, x))


def first_order_fast_pde_residual(merton, thetas, rho1, t, x):
    f = A.L_tx(P10, A.lam**2)
    env_val = merton.evaluate(f, t, x)
    d1sq = merton.evaluate(D1SQ, t, x)
    c = -0.5 * rho1 * thetas.B
    return _scalar(np.abs(c * env_val - 0.5 * rho1 * thetas.B * d1sq))


def first_order_slow(merton: MertonField, thetas: ThetaBundle, rho2: float, g: float, t, x,
                     form: str = "D1sq"):
    """Slow correction through ``D1^2 v0`` or through ``D1 v0_z``."""
    c = 0.5 * rho2 * thetas.lam_hat * g
    if form == "D1sq":
        return _scalar(c * thetas.lam_bar_p * merton.evaluate(P01, t, x))
    if form == "D1z":
        # (T - t) * D1 v0_z with v0_z = lam_bar' dM/dlam
        return _scalar(c * thetas.lam_bar_p * merton.evaluate(A.tau * A.D1(A.dlam(A.M)), t, x))
    raise ExpansionError(f"unknown form {form!r}")


def first_order_slow_pde_residual(merton, thetas, rho2, g, t, x):
    """``|L_tx v01 + rho2 lam_hat g D1 v0_z|``."""
    c = 0.5 * rho2 * thetas.lam_hat * thetas.lam_bar_p * g
    lhs = c * merton.evaluate(A.L_tx(P01, A.lam**2), t, x)
    rhs = -rho2 * thetas.lam_hat * g * thetas.lam_bar_p * merton.evaluate(A.D1(A.dlam(A.M)), t, x)
    return _scalar(np.abs(lhs - rhs))


def w_terms(merton: MertonField, thetas: ThetaBundle, spec: ModelSpec, t, x, y):
    """``(w20, w30, w21)`` on the product grid ``shape(t, x) + (len(y),)``."""
    s = slow_coefficients(spec, thetas)
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    out = {}
    for tm in _terms_w():
        th = thetas[tm.theta](y)
        val = tm.coef(s) * merton.evaluate(tm.poly, t, x)[..., None] * th
        out[tm.label] = out.get(tm.label, 0.0) + val
    return out["w20"], out["w30"], out["w21"]


def w20_poisson_residual(merton, thetas, spec: ModelSpec, t, x, y) -> float:
    """``max |L_y w20 + L_tx(lam(y, z)) v0|`` over the given points."""
    y = np.atleast_1d(np.asarray(y, float))
    th = thetas["theta"]
    Ly_theta = spec.b(y) * th.d(y) + 0.5 * spec.a(y) ** 2 * th.d2(y)
    d1 = merton.evaluate(D1M, t, x)[..., None]
    ly_w = -0.5 * Ly_theta * d1
    lam2 = spec.lam(y, thetas.z) ** 2
    ltx = merton.evaluate(A.dt(A.M), t, x)[..., None] + lam2 * merton.evaluate(A.hD(A.M), t, x)[..., None]
    return float(np.max(np.abs(ly_w + ltx)))


def vega_gamma_residual(bundle: ExpansionBundle, zs, ts, xs) -> dict:
    """Residuals of ``v0_z = (T-t) lam_bar lam_bar' D1 v0`` and the R_z identity."""
    tt, xx = np.meshgrid(np.asarray(ts, float), np.asarray(xs, float), indexing="ij")
    vz_lhs = A.dlam(A.M)
    vz_rhs = A.tau * A.lam * D1M
    rz_lhs = A.dlam(A.R)
    rz_rhs = A.tau * A.lam * A.R**2 * A.dx(A.dx(A.R))
    worst_v = worst_r = 0.0
    for z in np.atleast_1d(zs):
        tb = bundle.thetas(float(z))
        f = bundle.merton(float(z))
        lp = tb.lam_bar_p
        worst_v = max(worst_v, float(np.max(np.abs(lp * (f.evaluate(vz_lhs, tt, xx)
                                                          - f.evaluate(vz_rhs, tt, xx))))))
        worst_r = max(worst_r, float(np.max(np.abs(lp * (f.evaluate(rz_lhs, tt, xx)
                                                          - f.evaluate(rz_rhs, tt, xx))))))
    return {"v0_z": worst_v, "R_z": worst_r}


@dataclass(frozen=True)
class StrategyField:
    """Markov strategy: ``exposure = sigma * pi`` as a function of ``(t, x, y, z)``.

    ``state(t, x, z)`` optionally returns ``(R, v0_x)`` along paths for the
    admissibility diagnostics.
    """

    exposure: Callable
    order: str
    model: str
    proportional: bool = True
    state: Callable | None = None
    sigma: Callable | None = None

    def __call__(self, t, x, y, z):
        """Amount held in the stock."""
        return self.exposure(t, x, y, z) / self.sigma(y, z)


def lam_bar_curve(spec: ModelSpec, n: int = 65):
    """``z -> lam_bar(z)`` (constant when the Sharpe ratio ignores ``z``)."""
    dens = invariant_density(spec)
    if spec.params.get("lam_z", 0.0) == 0.0:
        lb = sharpe_averages(spec, spec.z_mean, dens)["lam_bar"]
        return lambda z: np.full(np.shape(z), lb)
    lo, hi = spec.z_domain
    zs = np.linspace(lo, hi, n)
    vals = [sharpe_averages(spec, z, dens)["lam_bar"] for z in zs]
    sp = CubicSpline(zs, vals)
    return lambda z: sp(np.clip(z, lo, hi))


def zeroth_strategy(bundle: ExpansionBundle) -> StrategyField:
    """``pi0 = lam(y, z) / sigma(y, z) * R(t, x; lam_bar(z))``."""
    spec = bundle.spec
    lb = lam_bar_curve(spec)
    lo, hi = spec.z_domain
    lmax = float(np.max(lb(np.linspace(lo, hi, 33))))
    table = RiskToleranceTable(bundle.kernel, 1.05 * lmax**2 * spec.T)

    def state(t, x, z):
        return table(x, lb(z) ** 2 * (spec.T - np.asarray(t, float)))

    def exposure(t, x, y, z):
        return spec.lam(y, z) * state(t, x, z)[0]

    def sigma(y, z):
        sig = spec.sigma(y, z)
        if np.any(sig <= 0):
            raise ExpansionError("sigma must be positive")
        return sig

    return StrategyField(exposure, "zeroth", spec.catalog_id, True, state, sigma)


def approx_value(bundle: ExpansionBundle, t, x, z: float, eps: float, delta: float):
    """``v0 + sqrt(eps) v10 + sqrt(delta) v01`` at slow level ``z``."""
    if eps < 0 or delta < 0:
        raise ExpansionError("eps and delta must be non-negative")
    f = bundle.merton(z)
    tb = bundle.thetas(z)
    spec = bundle.spec
    v0 = f.M(t, x)
    v10 = first_order_fast(f, tb, spec.rho1, t, x)
    v01 = first_order_slow(f, tb, spec.rho2, float(spec.g(z)), t, x)
    return _scalar(v0 + np.sqrt(eps) * v10 + np.sqrt(delta) * v01)


def terminal_check(bundle: ExpansionBundle, xs, z: float) -> float:
    """``max |v0(T) - U| + |v10(T)| + |v01(T)|`` on ``xs``."""
    T = bundle.spec.T
    xs = np.asarray(xs, float)
    f = bundle.merton(z)
    tb = bundle.thetas(z)
    u = bundle.utility.U(xs)
    err = np.abs(f.M(T, xs) - u)
    err += np.abs(first_order_fast(f, tb, bundle.spec.rho1, T, xs))
    err += np.abs(first_order_slow(f, tb, bundle.spec.rho2, float(bundle.spec.g(z)), T, xs))
    return float(np.max(err))
