"""Utility families on positive wealth and checks of their regularity conditions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import series

FAMILIES = ("power", "log", "mixture", "inverse_marginal")


class UtilityError(ValueError):
    pass


def _newton_logsum(weights, rates, target_log, lo):
    """Solve ``log(sum w_i exp(-r_i L)) = target_log`` for L (convex decreasing)."""
    L = lo
    for _ in range(200):
        terms = weights[:, None] * np.exp(-rates[:, None] * L[None, :])
        tot = terms.sum(axis=0)
        f = np.log(tot) - target_log
        fp = -(rates[:, None] * terms).sum(axis=0) / tot
        step = f / fp
        L = L - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(L))):
            break
    return L


@dataclass(frozen=True)
class UtilitySpec:
    """A utility function U on (0, inf) with U', U'', R = -U'/U'' and I = (U')^-1.

    ``weights``/``gammas`` describe a mixture ``U' = sum w_i x**-gamma_i``
    (family ``power``/``log``/``mixture``) or, for ``inverse_marginal``, the
    sum ``I(y) = sum w_i y**(-1/gamma_i)``.
    """

    family: str
    weights: tuple = field(default=(1.0,))
    gammas: tuple = field(default=(2.0,))

    @property
    def _w(self):
        return np.asarray(self.weights, dtype=float)

    @property
    def _g(self):
        return np.asarray(self.gammas, dtype=float)

    @property
    def is_power(self) -> bool:
        return self.family in ("power", "log")

    @property
    def gamma(self) -> float:
        if not self.is_power:
            raise UtilityError(f"{self.family} utility has no single gamma")
        return float(self.gammas[0])

    # -- marginal utility side -------------------------------------------------
    def dU(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "inverse_marginal":
            return np.exp(-self._u_of_x(x))
        return sum(w * x ** (-g) for w, g in zip(self._w, self._g))

    def d2U(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "inverse_marginal":
            y = self.dU(x)
            return -y / self._R_of_marginal(y)
        return sum(-w * g * x ** (-g - 1.0) for w, g in zip(self._w, self._g))

    def U(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "inverse_marginal":
            return self.U_of_heat(self._u_of_x(x))
        out = np.zeros(np.shape(x))
        for w, g in zip(self._w, self._g):
            out = out + (w * np.log(x) if g == 1.0 else w * x ** (1.0 - g) / (1.0 - g))
        return out

    def risk_tolerance(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "inverse_marginal":
            return self._R_of_marginal(self.dU(x))
        return -self.dU(x) / self.d2U(x)

    def risk_tolerance_prime(self, x):
        return series.derivatives(self.R_series(x, 2))[1]

    def inverse_marginal(self, y):
        """I(y) = (U')^-1(y)."""
        y = np.asarray(y, dtype=float)
        return self.h(-np.log(y))

    # -- heat-coordinate representation h(u) = I(exp(-u)) ----------------------
    def h(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.family == "inverse_marginal":
            return sum(w * np.exp(u / g) for w, g in zip(self._w, self._g))
        if len(self._g) == 1:
            return np.exp((u + np.log(self._w[0])) / self._g[0])
        w, g = self._w, self._g
        flat = u.ravel()
        lo = np.max((np.log(w)[:, None] + flat[None, :]) / g[:, None], axis=0)
        return np.exp(_newton_logsum(w, g, -flat, lo)).reshape(u.shape)

    def _u_of_x(self, x):
        """Heat coordinate u with h(u) = x, i.e. u = -log U'(x)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.family != "inverse_marginal":
            return -np.log(self.dU(x))
        w, g = self._w, self._g
        lo = np.min((np.log(x)[None, :] - np.log(w)[:, None]) * g[:, None], axis=0)
        return self._solve_u(x, lo)

    def _solve_u(self, x, lo):
        w, g = self._w, self._g
        u = lo.copy()
        target = np.log(x)
        for _ in range(200):
            terms = w[:, None] * np.exp(u[None, :] / g[:, None])
            tot = terms.sum(axis=0)
            f = np.log(tot) - target
            fp = (terms / g[:, None]).sum(axis=0) / tot
            step = f / fp
            u = u - step
            if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(u))):
                break
        return u

    def _R_of_marginal(self, y):
        return sum(w / g * y ** (-1.0 / g) for w, g in zip(self._w, self._g))

    def U_of_heat(self, u):
        """U(h(u)) as a function of the heat coordinate."""
        u = np.asarray(u, dtype=float)
        if self.family == "inverse_marginal":
            out = np.zeros(np.shape(u))
            for w, g in zip(self._w, self._g):
                out = out + (w * u if g == 1.0 else w / (1.0 - g) * np.exp(u * (1.0 - g) / g))
            return out
        return self.U(self.h(u)).reshape(np.shape(u))

    def h_series(self, u0, n: int):
        """Taylor coefficients of h around ``u0`` (shape ``(n, *u0.shape)``)."""
        u0 = np.asarray(u0, dtype=float)
        out = np.zeros((n,) + u0.shape)
        if self.family == "inverse_marginal" or (self.is_power and self._w[0] == 1.0):
            ws, gs = (self._w, self._g)
            fac = 1.0
            for j in range(n):
                if j:
                    fac *= j
                out[j] = sum(w * np.exp(u0 / g) * g ** (-j) for w, g in zip(ws, gs)) / fac
            return out
        # mixture: solve sum w_i h^-g_i = exp(-u0 - v) order by order
        h0 = self.h(u0.ravel()).reshape(u0.shape)
        out[0] = h0
        fprime = sum(-w * g * h0 ** (-g - 1.0) for w, g in zip(self._w, self._g))
        target = np.zeros_like(out)
        fac = 1.0
        for j in range(n):
            if j:
                fac *= j
            target[j] = np.exp(-u0) * (-1.0) ** j / fac
        for j in range(1, n):
            trial = out[: j + 1].copy()
            trial[j] = 0.0
            acc = sum(w * series.power(trial, -g)[j] for w, g in zip(self._w, self._g))
            out[j] = (target[j] - acc) / fprime
        return out

    def R_series(self, x0, n: int):
        """Taylor coefficients of the risk tolerance R around ``x0``."""
        x0 = np.asarray(x0, dtype=float)
        if self.family == "inverse_marginal":
            # R(x) = h'(u(x)); use dR/dx = h''(u)/h'(u) chain through series in u
            u0 = self._u_of_x(x0.ravel()).reshape(x0.shape)
            hs = self.h_series(u0, n + 1)
            # invert x(u) = h(u) around u0: u(x0 + v) series
            dx_series = hs.copy()
            dx_series[0] = 0.0
            inv = _revert(dx_series, n)
            hp = series.deriv(hs)[:n]
            return _compose(hp, inv)
        v = series.variable(x0, n + 1)
        up = sum(w * series.power(v, -g) for w, g in zip(self._w, self._g))
        upp = series.deriv(up)
        return -series.div(up[:n], upp[:n])


def _revert(a, n):
    """Series reversion: given x = sum_{j>=1} a_j v^j, return v as series in x."""
    batch = a.shape[1:]
    inv = np.zeros((n,) + batch)
    if n > 1:
        inv[1] = 1.0 / a[1]
    for j in range(2, n):
        # coefficient j of a(inv(x)) must vanish
        trial = inv.copy()
        comp = _compose(a[:n], trial)
        inv[j] = -comp[j] / a[1]
    return inv


def _compose(a, b):
    """a(b(x)) where b has zero constant term."""
    n = b.shape[0]
    out = np.zeros((n,) + b.shape[1:])
    powb = np.zeros_like(out)
    powb[0] = 1.0
    for j in range(min(a.shape[0], n)):
        out = out + a[j] * powb
        powb = series.mul(powb, b)
    return out


def make_utility(config: dict | None = None, **kwargs) -> UtilitySpec:
    cfg = dict(config or {})
    cfg.update(kwargs)
    fam = cfg.get("family", "power")
    if fam not in FAMILIES:
        raise UtilityError(f"unknown utility family {fam!r}")
    if fam == "power":
        g = float(cfg.get("gamma", 2.0))
        if g <= 0 or g == 1.0:
            raise UtilityError("power utility needs gamma > 0, gamma != 1 (use family='log')")
        spec = UtilitySpec("power", (1.0,), (g,))
    elif fam == "log":
        spec = UtilitySpec("log", (1.0,), (1.0,))
    else:
        w = tuple(float(v) for v in cfg.get("weights", ()))
        g = tuple(float(v) for v in cfg.get("gammas", ()))
        if not w or len(w) != len(g):
            raise UtilityError("weights and gammas must be non-empty and of equal length")
        if any(v <= 0 for v in w) or any(v <= 0 for v in g):
            raise UtilityError("weights and gammas must be positive")
        spec = UtilitySpec(fam, w, g)
    grid = np.logspace(-3, 3, 61)
    if not (np.all(spec.dU(grid) > 0) and np.all(spec.d2U(grid) < 0)):
        raise UtilityError("utility fails the monotonicity/concavity probe")
    return spec


def eval_utility(spec: UtilitySpec, x):
    """(U, U', U'', R, R', I(U'(x))) at wealth ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise UtilityError("wealth must be positive")
    up = spec.dU(x)
    return (
        spec.U(x),
        up,
        spec.d2U(x),
        spec.risk_tolerance(x),
        spec.risk_tolerance_prime(np.atleast_1d(x)).reshape(np.shape(x)),
        spec.inverse_marginal(up).reshape(np.shape(x)),
    )


@dataclass
class AssumptionReport:
    inada_zero: bool
    inada_infinity: bool
    ae_proxy: float
    ae_ok: bool
    r_zero: float
    r_increasing: bool
    r_prime_max: float
    power_derivative_sups: dict
    growth_exponent: float
    roundtrip_max_rel: float
    passed: bool = False

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def check_assumption_u(spec: UtilitySpec, grid=None) -> AssumptionReport:
    grid = np.logspace(-3, 3, 121) if grid is None else np.asarray(grid, dtype=float)
    small = 10.0 ** -np.arange(1, 9)
    large = 10.0 ** np.arange(1, 9)
    up_small, up_large = spec.dU(small), spec.dU(large)
    inada0 = bool(np.all(np.diff(up_small) > 0) and up_small[-1] > 1e6)
    inada_inf = bool(np.all(np.diff(up_large) < 0) and up_large[-1] < 1e-3)
    xbig = 1e6
    ae = float(xbig * spec.dU(xbig) / spec.U(xbig))
    r_small = spec.risk_tolerance(small)
    r = spec.risk_tolerance(grid)
    sups = {}
    coeffs = spec.R_series(grid, 8)
    for i in range(2, 8):
        pw = series.power(coeffs, float(i))
        sups[i] = float(np.max(np.abs(math.factorial(i) * pw[i])))
    rprime = series.derivatives(coeffs)[1]
    ys = np.logspace(-8, -4, 9)
    slope = np.polyfit(np.log(ys), np.log(spec.inverse_marginal(ys)), 1)[0]
    rt = np.max(np.abs(spec.inverse_marginal(spec.dU(grid)) / grid - 1.0))
    rep = AssumptionReport(
        inada_zero=inada0,
        inada_infinity=inada_inf,
        ae_proxy=ae,
        ae_ok=bool(ae < 1.0),
        r_zero=float(r_small[-1]),
        r_increasing=bool(np.all(np.diff(r) > 0)),
        r_prime_max=float(np.max(np.abs(rprime))),
        power_derivative_sups=sups,
        growth_exponent=float(-slope),
        roundtrip_max_rel=float(rt),
    )
    rep.passed = (
        rep.inada_zero
        and rep.inada_infinity
        and rep.ae_ok
        and rep.r_zero < 1e-6
        and rep.r_increasing
        and all(np.isfinite(v) for v in sups.values())
    )
    return rep
