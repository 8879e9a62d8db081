"""Constant-Sharpe-ratio Merton problem.

Two independent routes are provided:

* kernel fields: ``M`` and all its derivatives through the heat-coordinate
  algebra, fed by a closed-form kernel (power, log, inverse-marginal sums)
  or by Gauss-Hermite quadrature of the smoothed inverse marginal utility;
* a Crank-Nicolson solve of the backward heat equation for ``H`` followed by
  reconstruction of ``M`` from ``M_x(t, H(xi, t)) = exp(-xi - s/2)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded

from . import algebra
from . import series
from .utility import UtilitySpec


class MertonError(ValueError):
    pass


# ---------------------------------------------------------------- kernels ----

class SumExpKernel:
    """Closed form for ``h(u) = sum c_i exp(u / g_i)``.

    Covers power, log and inverse-marginal families; ``const_i`` carries the
    additive constant of the log term.
    """

    def __init__(self, cs, gammas, consts):
        self.c = np.asarray(cs, dtype=float)
        self.g = np.asarray(gammas, dtype=float)
        self.const = np.asarray(consts, dtype=float)

    def heat(self, xi, s, n: int):
        xi, s = np.broadcast_arrays(np.asarray(xi, float), np.asarray(s, float))
        out = np.zeros((n,) + xi.shape)
        for c, g in zip(self.c, self.g):
            base = c * np.exp(xi / g + s / (2.0 * g * g))
            for j in range(n):
                out[j] += base * g ** (-j)
        return out

    def m(self, xi, s):
        xi, s = np.broadcast_arrays(np.asarray(xi, float), np.asarray(s, float))
        out = np.zeros(xi.shape)
        for c, g, k0 in zip(self.c, self.g, self.const):
            if g == 1.0:
                out += c * (xi + s) + k0
            else:
                a = (1.0 - g) / g
                out += c / (1.0 - g) * np.exp(a * (xi + s) + 0.5 * a * a * s)
        return out

    def xi_of(self, x, s):
        x, s = np.broadcast_arrays(np.asarray(x, float), np.asarray(s, float))
        if len(self.c) == 1:
            g = self.g[0]
            return g * np.log(x / self.c[0]) - s / (2.0 * g)
        # log K0 is increasing and convex in xi
        lx = np.log(x)
        xi = np.min(self.g[:, None] * (lx.ravel()[None, :] - np.log(self.c)[:, None])
                    - s.ravel()[None, :] / (2.0 * self.g[:, None]), axis=0).reshape(x.shape)
        for _ in range(200):
            k = self.heat(xi, s, 2)
            step = (np.log(k[0]) - lx) * k[0] / k[1]
            xi = xi - step
            if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, np.abs(xi))):
                break
        return xi


class QuadratureKernel:
    """``K_n(xi, s) = E[h^(n)(xi + sqrt(s) W)]`` by Gauss-Hermite quadrature."""

    def __init__(self, utility: UtilitySpec, nodes: int = 64):
        self.utility = utility
        z, w = np.polynomial.hermite_e.hermegauss(nodes)
        self.z = z
        self.w = w / np.sqrt(2.0 * np.pi)

    def _points(self, center, s):
        return center[..., None] + np.sqrt(s)[..., None] * self.z

    def heat(self, xi, s, n: int):
        xi, s = np.broadcast_arrays(np.asarray(xi, float), np.asarray(s, float))
        u = self._points(xi, s)
        d = series.derivatives(self.utility.h_series(u, n))
        return d @ self.w

    def m(self, xi, s):
        xi, s = np.broadcast_arrays(np.asarray(xi, float), np.asarray(s, float))
        u = self._points(xi + s, s)
        return self.utility.U_of_heat(u) @ self.w

    def xi_of(self, x, s):
        x, s = np.broadcast_arrays(np.asarray(x, float), np.asarray(s, float))
        lx = np.log(x)
        xi = self.utility._u_of_x(x.ravel()).reshape(x.shape)
        for _ in range(100):
            k = self.heat(xi, s, 2)
            step = (np.log(k[0]) - lx) * k[0] / k[1]
            xi = xi - step
            if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, np.abs(xi))):
                break
        return xi


def kernel_for(utility: UtilitySpec, nodes: int = 64):
    """Closed-form kernel when one exists, quadrature otherwise."""
    w, g = np.asarray(utility.weights, float), np.asarray(utility.gammas, float)
    if utility.family == "inverse_marginal":
        return SumExpKernel(w, g, np.zeros_like(w))
    if utility.is_power:
        c = w ** (1.0 / g)
        const = np.where(g == 1.0, w * np.log(w), 0.0)
        return SumExpKernel(c, g, const)
    return QuadratureKernel(utility, nodes)


class RiskToleranceTable:
    """``R`` and ``M_x`` as functions of ``(x, s)``, for path simulation.

    Single-term closed-form kernels are evaluated directly; otherwise ``xi``
    and ``log K_1`` are splined over ``(log x, s)`` and ``x`` is clipped to
    the table range.
    """

    def __init__(self, kernel, s_max: float, x_lo: float = 1e-4, x_hi: float = 1e4,
                 n_x: int = 401, n_s: int = 41):
        self.kernel = kernel
        self.direct = isinstance(kernel, SumExpKernel) and len(kernel.c) == 1
        self.bounds = (x_lo, x_hi)
        if not self.direct:
            lx = np.linspace(np.log(x_lo), np.log(x_hi), n_x)
            ss = np.linspace(0.0, max(s_max, 1e-8), n_s)
            L, S = np.meshgrid(lx, ss, indexing="ij")
            xi = kernel.xi_of(np.exp(L), S)
            k1 = kernel.heat(xi, S, 2)[1]
            self._xi = RectBivariateSpline(lx, ss, xi, kx=3, ky=3)
            self._lk1 = RectBivariateSpline(lx, ss, np.log(k1), kx=3, ky=3)

    def __call__(self, x, s):
        """``(R, M_x)`` at wealth ``x`` and accumulated variance ``s``."""
        x, s = np.broadcast_arrays(np.asarray(x, float), np.asarray(s, float))
        if self.direct:
            xi = self.kernel.xi_of(x, s)
            return self.kernel.heat(xi, s, 2)[1], np.exp(-xi - 0.5 * s)
        lx = np.log(np.clip(x, *self.bounds))
        xi = self._xi.ev(lx, s)
        return np.exp(self._lk1.ev(lx, s)), np.exp(-xi - 0.5 * s)


def heat_env(kernel, t, x, lam, T: float, nk: int) -> dict:
    """Numeric values of the algebra generators at ``(t, x)`` for Sharpe ratio ``lam``."""
    t, x, lam = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float),
                                    np.asarray(lam, float))
    tau = T - t
    s = lam**2 * tau
    xi = kernel.xi_of(x, s)
    ks = kernel.heat(xi, s, max(nk, 2))
    env = {"e": np.exp(-xi - 0.5 * s), "ie": np.exp(xi + 0.5 * s), "m": kernel.m(xi, s), "ik": 1.0 / ks[1],
           "tau": tau, "lam": lam, "T": np.full(x.shape, float(T)), "xi": xi, "s": s}
    for n in range(ks.shape[0]):
        env[f"k{n}"] = ks[n]
    return env


# ----------------------------------------------------------------- fields ----

@dataclass(frozen=True)
class MertonField:
    """Merton value ``M(t, x; lam)`` with derivatives from the heat algebra."""

    utility: UtilitySpec
    lam: float
    T: float
    kernel: object

    def env(self, t, x, nk: int = 3):
        return heat_env(self.kernel, t, x, self.lam, self.T, nk)

    def evaluate(self, poly, t, x):
        f = algebra.compile_poly(poly)
        return f(self.env(t, x, f.nk))

    def M(self, t, x):
        return self.evaluate(algebra.M, t, x)

    def R(self, t, x):
        return self.evaluate(algebra.R, t, x)

    def partials(self, t, x) -> dict:
        env = self.env(t, x, 4)
        out = {}
        for key, poly in (("M", algebra.M), ("t", algebra.dt(algebra.M)),
                          ("x", algebra.Mx), ("xx", algebra.Mxx)):
            out[key] = algebra.compile_poly(poly)(env)
        return out


class GridMertonField:
    """Merton value reconstructed from a heat-equation grid; derivatives by differences."""

    def __init__(self, hfield: "HField", utility: UtilitySpec):
        self.h = hfield
        self.utility = utility
        self.lam = hfield.lam
        self.T = hfield.T

    def M(self, t, x):
        return self.h.merton_value(t, x)

    def R(self, t, x):
        return self.h.risk_tolerance(t, x)

    def partials(self, t, x) -> dict:
        return self.h.merton_partials(t, x)


class ShiftedField:
    """``M + slope * x``; used to confirm the residual detects non-solutions."""

    def __init__(self, base, slope: float):
        self.base = base
        self.slope = slope
        self.lam = base.lam
        self.T = base.T

    def M(self, t, x):
        return self.base.M(t, x) + self.slope * np.asarray(x, float)

    def partials(self, t, x) -> dict:
        p = dict(self.base.partials(t, x))
        p["M"] = p["M"] + self.slope * np.asarray(x, float)
        p["x"] = p["x"] + self.slope
        return p


def solve_merton(utility: UtilitySpec, lambda_bar: float, T: float, method: str = "auto",
                 grid: "HeatGrid | None" = None):
    """Merton field for constant Sharpe ratio.

    ``method``: ``"auto"`` (closed form if available, else the heat grid),
    ``"kernel"`` (closed form or quadrature) or ``"heat"``.
    """
    if not lambda_bar >= 0 or not T > 0:
        raise MertonError("need lambda_bar >= 0 and T > 0")
    closed = utility.is_power or utility.family == "inverse_marginal"
    if method == "kernel" or (method == "auto" and closed):
        return MertonField(utility, float(lambda_bar), float(T), kernel_for(utility))
    if method not in ("auto", "heat"):
        raise MertonError(f"unknown method {method!r}")
    return GridMertonField(solve_h_transform(utility, lambda_bar, T, grid), utility)


def merton_residual(field, t, x):
    """``M_t - lam^2/2 M_x^2 / M_xx``."""
    p = field.partials(t, x)
    if np.any(p["xx"] == 0):
        raise MertonError("M_xx vanished")
    return p["t"] - 0.5 * field.lam**2 * p["x"] ** 2 / p["xx"]


_TAGS = {"D1", "D2", "dx", "dlam", "R", "dz", "hD"}


def compose(ks, poly=None):
    """Apply operator tags right-to-left to ``poly`` (default ``M``)."""
    f = algebra.M if poly is None else poly
    for tag in reversed(list(ks)):
        if tag == "D1":
            f = algebra.D1(f)
        elif tag == "hD":
            f = algebra.hD(f)
        elif tag == "dx":
            f = algebra.dx(f)
        elif tag == "dlam":
            f = algebra.dlam(f)
        elif tag == "R":
            f = algebra.R * f
        elif tag.startswith("D") and tag[1:].isdigit():
            f = algebra.D(int(tag[1:]), f)
        else:
            raise MertonError(f"unknown operator tag {tag!r}")
    return f


def apply_dk(field, ks, t, x, lam_prime: float | None = None):
    """Composite operator applied to ``M``; ``"dz"`` needs ``lam_prime = dlam/dz``."""
    ks = list(ks)
    if not isinstance(field, MertonField):
        if any(tag not in ("D1", "dx") for tag in ks) or len(ks) > 2:
            raise MertonError("grid fields only support up to two x-derivatives")
        p = field.partials(t, x)
        r = field.R(t, x)
        out = {(): p["M"], ("dx",): p["x"], ("D1",): r * p["x"], ("dx", "dx"): p["xx"]}
        if tuple(ks) in out:
            return out[tuple(ks)]
        raise MertonError("composition exceeds the grid field smoothness budget")
    scale = 1.0
    if "dz" in ks:
        # a single z-derivative reduces to lam'(z) d/dlam
        if lam_prime is None or ks.count("dz") > 1:
            raise MertonError("dz needs lam_prime and may appear once")
        ks = ["dlam" if tag == "dz" else tag for tag in ks]
        scale = lam_prime
    for tag in ks:
        if not (tag in _TAGS or (tag.startswith("D") and tag[1:].isdigit())):
            raise MertonError(f"unknown operator tag {tag!r}")
    return scale * field.evaluate(compose(ks), t, x)


def risk_tolerance_sups(field: MertonField, ts, xs, jmax: int = 7) -> dict:
    """Grid sups of ``|d^j/dx^j R^j|`` for ``j = 1..jmax``."""
    tt, xx = np.meshgrid(np.asarray(ts, float), np.asarray(xs, float), indexing="ij")
    out = {}
    for j in range(1, jmax + 1):
        f = algebra.R ** j
        for _ in range(j):
            f = algebra.dx(f)
        out[j] = float(np.max(np.abs(field.evaluate(f, tt, xx))))
    return out


def risk_tolerance_constant(field, ts, xs) -> float:
    """Measured ``K0 = max R / x`` over the grid (``0 <= R <= K0 x``)."""
    tt, xx = np.meshgrid(np.asarray(ts, float), np.asarray(xs, float), indexing="ij")
    r = field.R(tt, xx)
    if np.any(r < 0):
        raise MertonError("negative risk tolerance")
    return float(np.max(r / xx))


def dump_csv(field, path, ts, xs) -> None:
    tt, xx = np.meshgrid(np.asarray(ts, float), np.asarray(xs, float), indexing="ij")
    mm, rr = field.M(tt, xx), field.R(tt, xx)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "M", "R"])
        for row in zip(tt.ravel(), xx.ravel(), mm.ravel(), rr.ravel()):
            w.writerow([f"{v:.12g}" for v in row])


# ------------------------------------------------------------ heat solver ----

@dataclass(frozen=True)
class HeatGrid:
    n_xi: int = 3201
    n_t: int = 400
    xi_lo: float | None = None
    xi_hi: float | None = None
    x_lo: float = 1e-3
    x_hi: float = 1e3


class HField:
    """Backward heat solution ``H(t, xi)`` with terminal data ``I(exp(-xi))``.

    Also carries the reconstructed Merton values ``m(t, xi) = M(t, H(t, xi))``.
    """

    def __init__(self, utility, lam, T, xi, taus, H, m):
        self.utility = utility
        self.lam = float(lam)
        self.T = float(T)
        self.xi = xi
        self.taus = taus
        self.H = H
        self.m = m
        kt = min(3, len(taus) - 1)
        self._logH = RectBivariateSpline(taus, xi, np.log(H), kx=kt, ky=3)
        self._m = RectBivariateSpline(taus, xi, m, kx=kt, ky=3)

    def __call__(self, t, xi):
        t, xi = np.broadcast_arrays(np.asarray(t, float), np.asarray(xi, float))
        return np.exp(self._logH.ev(self.T - t, xi))

    def d_xi(self, t, xi):
        t, xi = np.broadcast_arrays(np.asarray(t, float), np.asarray(xi, float))
        return self(t, xi) * self._logH.ev(self.T - t, xi, dy=1)

    def inverse(self, w, t):
        """``xi`` with ``H(t, xi) = w`` (Newton on log H)."""
        w, t = np.broadcast_arrays(np.asarray(w, float), np.asarray(t, float))
        lw = np.log(w)
        tau = self.T - t
        xi = np.interp(lw, np.log(self.H[0]), self.xi)
        for _ in range(60):
            f = self._logH.ev(tau, xi) - lw
            fp = self._logH.ev(tau, xi, dy=1)
            step = f / fp
            xi = np.clip(xi - step, self.xi[0], self.xi[-1])
            if np.all(np.abs(step) < 1e-13):
                break
        return xi

    def merton_value(self, t, x):
        xi = self.inverse(x, t)
        t = np.broadcast_to(np.asarray(t, float), xi.shape)
        return self._m.ev(self.T - t, xi)

    def merton_partials(self, t, x) -> dict:
        """``M, M_t, M_x, M_xx`` by the chain rule through the spline surfaces of ``m`` and ``H``."""
        xi = self.inverse(x, t)
        tau = self.T - np.broadcast_to(np.asarray(t, float), xi.shape)
        lh = self._logH
        L1, L2 = lh.ev(tau, xi, dy=1), lh.ev(tau, xi, dy=2)
        Lt = lh.ev(tau, xi, dx=1)
        Hv = np.exp(lh.ev(tau, xi))
        H1, H2 = Hv * L1, Hv * (L2 + L1**2)
        m1, m2 = self._m.ev(tau, xi, dy=1), self._m.ev(tau, xi, dy=2)
        Mx = m1 / H1
        # xi moves with t at fixed x: dxi/dtau = -H_tau / H_xi
        dxi_dtau = -Hv * Lt / H1
        Mt = -(self._m.ev(tau, xi, dx=1) + m1 * dxi_dtau)
        return {"M": self._m.ev(tau, xi), "t": Mt, "x": Mx, "xx": (m2 - Mx * H2) / H1**2}

    def risk_tolerance(self, t, x):
        xi = self.inverse(x, t)
        return self.d_xi(t, xi)

    def heat_residual(self) -> float:
        """Max relative residual of ``H_tau - lam^2/2 H_xixi`` on the CN grid."""
        dxi = self.xi[1] - self.xi[0]
        dt = np.diff(self.taus)
        H = self.H
        lap = (H[:, 2:] - 2 * H[:, 1:-1] + H[:, :-2]) / dxi**2
        lhs = (H[1:, 1:-1] - H[:-1, 1:-1]) / dt[:, None]
        rhs = 0.25 * self.lam**2 * (lap[1:] + lap[:-1])
        return float(np.max(np.abs(lhs - rhs) / H[1:, 1:-1]))


def _boundary(utility, xi_b, lam, taus):
    # exponential extrapolation using the local log-slope of the terminal data
    d = 1e-4
    k = (np.log(utility.h(xi_b + d)) - np.log(utility.h(xi_b - d)))[0] / (2 * d)
    return utility.h(xi_b)[0] * np.exp(0.5 * lam**2 * taus * k * k)


def solve_h_transform(utility: UtilitySpec, lambda_bar: float, T: float,
                      grid: HeatGrid | None = None) -> HField:
    grid = grid or HeatGrid()
    lam = float(lambda_bar)
    if not lam >= 0 or not T > 0:
        raise MertonError("need lambda_bar >= 0 and T > 0")
    margin = 8.0 * lam * np.sqrt(T) + 2.0
    lo = grid.xi_lo if grid.xi_lo is not None else float(utility._u_of_x(grid.x_lo)[0]) - margin
    hi = grid.xi_hi if grid.xi_hi is not None else float(utility._u_of_x(grid.x_hi)[0]) + margin
    xi = np.linspace(lo, hi, grid.n_xi)
    dxi = xi[1] - xi[0]
    taus = np.linspace(0.0, T, grid.n_t + 1)
    dt = taus[1] - taus[0]
    H = np.empty((len(taus), len(xi)))
    H[0] = utility.h(xi)
    if not np.all(np.isfinite(H[0])) or np.any(H[0] <= 0):
        raise MertonError("terminal data overflows the truncation domain")
    left = _boundary(utility, xi[:1], lam, taus)
    right = _boundary(utility, xi[-1:], lam, taus)
    r = 0.5 * lam**2 * dt / dxi**2
    n = len(xi) - 2
    ab = np.zeros((3, n))
    ab[0, 1:] = -0.5 * r
    ab[1, :] = 1.0 + r
    ab[2, :-1] = -0.5 * r
    for j in range(1, len(taus)):
        prev = H[j - 1]
        rhs = prev[1:-1] + 0.5 * r * (prev[2:] - 2 * prev[1:-1] + prev[:-2])
        rhs[0] += 0.5 * r * left[j]
        rhs[-1] += 0.5 * r * right[j]
        H[j, 1:-1] = solve_banded((1, 1), ab, rhs)
        H[j, 0], H[j, -1] = left[j], right[j]
        if not np.all(np.isfinite(H[j])) or np.any(H[j] <= 0):
            raise MertonError("heat solve diverged; refine the grid")
    m = _reconstruct_m(utility, lam, xi, taus, H)
    return HField(utility, lam, T, xi, taus, H, m)


def _reconstruct_m(utility, lam, xi, taus, H):
    """Merton values on the grid from ``M_x = exp(-xi - s/2)``.

    Along a slice, ``dm = e H_xi dxi``; integrating by parts keeps the
    quadrature free of differentiated grid data.  The anchor at the middle
    node follows ``dm/dtau = lam^2/2 e (H_xi + H_xixi)``.
    """
    dxi = xi[1] - xi[0]
    s = lam**2 * taus[:, None]
    e = np.exp(-xi[None, :] - 0.5 * s)
    i0 = len(xi) // 2
    w = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12 * dxi)
    w2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12 * dxi**2)
    sl = H[:, i0 - 2:i0 + 3]
    rate = 0.5 * lam**2 * e[:, i0] * (sl @ w + sl @ w2)
    anchor = utility.U_of_heat(np.array([xi[i0]]))[0] + np.concatenate(
        ([0.0], np.cumsum(0.5 * (rate[1:] + rate[:-1]) * np.diff(taus))))
    eh = e * H
    # integrate outward from the anchor: the integrand spans many decades
    cum = np.empty_like(eh)
    cum[:, i0:] = cumulative_simpson(eh[:, i0:], dx=dxi, axis=1, initial=0.0)
    cum[:, :i0 + 1] = -cumulative_simpson(eh[:, i0::-1], dx=dxi, axis=1, initial=0.0)[:, ::-1]
    return anchor[:, None] + eh - eh[:, i0:i0 + 1] + cum
