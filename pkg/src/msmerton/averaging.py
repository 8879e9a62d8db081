"""Fast-factor averaging and centered Poisson solves.

The fast generator is ``L_y = b d_y + a^2/2 d_yy`` with invariant density
``Phi``.  Poisson equations ``L_y theta = rhs - <rhs>`` are solved through the
divergence form ``(a^2 Phi theta' / 2)' = (rhs - <rhs>) Phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import CubicSpline

from .model import ModelSpec


class AveragingError(ValueError):
    pass


@dataclass(frozen=True)
class InvariantDensity:
    y: np.ndarray
    pdf: np.ndarray
    mean: float
    std: float
    gaussian: bool
    mode_index: int

    def grid_average(self, values) -> float:
        return float(simpson(np.asarray(values) * self.pdf, x=self.y))

    def __call__(self, y):
        return np.interp(y, self.y, self.pdf, left=0.0, right=0.0)


def invariant_density(spec: ModelSpec, n: int = 8001, width: float = 10.0) -> InvariantDensity:
    lo, hi = spec.y_mean - width * spec.y_std, spec.y_mean + width * spec.y_std
    y = np.linspace(lo, hi, n)
    a2 = spec.a(y) ** 2
    # log of exp(int 2b/a^2) / a^2, integrated from the mean
    drift = cumulative_simpson(2.0 * spec.b(y) / a2, x=y, initial=0.0)
    drift -= np.interp(spec.y_mean, y, drift)
    logp = drift - np.log(a2)
    logp -= logp.max()
    pdf = np.exp(logp)
    mass = simpson(pdf, x=y)
    if not np.isfinite(mass) or pdf[0] > 1e-12 or pdf[-1] > 1e-12:
        raise AveragingError("invariant density is not integrable on the working domain")
    pdf = pdf / mass
    return InvariantDensity(y, pdf, spec.y_mean, spec.y_std, spec.fast_is_gaussian,
                            int(np.argmax(pdf)))


def average(f, density: InvariantDensity, tol: float = 1e-10, max_nodes: int = 512) -> float:
    """``<f> = int f dPhi``; node count doubled until the change is below ``tol``."""
    if density.gaussian:
        def rule(n):
            z, w = np.polynomial.hermite_e.hermegauss(n)
            return float(np.dot(w, f(density.mean + density.std * z)) / np.sqrt(2.0 * np.pi))
    else:
        def rule(n):
            y = np.linspace(density.y[0], density.y[-1], 8 * n + 1)
            return float(np.trapezoid(f(y) * density(y), y))
    n = 16
    prev = rule(n)
    while n < max_nodes:
        n *= 2
        cur = rule(n)
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    raise AveragingError("quadrature did not converge under node doubling")


@dataclass
class PoissonSolution:
    """Centered solution of ``L_y theta = rhs - <rhs>`` on the density grid."""

    y: np.ndarray
    theta: np.ndarray
    dtheta: np.ndarray
    d2theta: np.ndarray
    rhs_centered: np.ndarray
    rhs_mean: float
    b: np.ndarray
    a: np.ndarray
    _splines: tuple = field(default=None, repr=False)

    def _sp(self):
        if self._splines is None:
            self._splines = (CubicSpline(self.y, self.theta), CubicSpline(self.y, self.dtheta),
                             CubicSpline(self.y, self.d2theta))
        return self._splines

    def __call__(self, y):
        return self._sp()[0](y)

    def d(self, y):
        return self._sp()[1](y)

    def d2(self, y):
        return self._sp()[2](y)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.theta)

    def residual(self, n_std: float = 4.0, center: float = 0.0, std: float = 1.0) -> float:
        """Max |b theta' + a^2/2 theta''_fd - rhs_c| with a 5-point stencil of theta'."""
        h = self.y[1] - self.y[0]
        d = self.dtheta
        fd = (d[:-4] - 8 * d[1:-3] + 8 * d[3:-1] - d[4:]) / (12 * h)
        inner = slice(2, -2)
        res = self.b[inner] * d[inner] + 0.5 * self.a[inner] ** 2 * fd - self.rhs_centered[inner]
        mask = np.abs(self.y[inner] - center) <= n_std * std
        return float(np.max(np.abs(res[mask])))


def _zero_solution(y, rhs_c, mean, b, a):
    z = np.zeros_like(y)
    return PoissonSolution(y, z, z.copy(), z.copy(), rhs_c, mean, b, a)


def solve_poisson(rhs, spec: ModelSpec, density: InvariantDensity | None = None,
                  rounding: float = 1e-13) -> PoissonSolution:
    """Centered ``theta`` with ``L_y theta = rhs - <rhs>``.

    ``rhs`` is a callable of ``y`` or an array on the density grid.
    """
    dens = density or invariant_density(spec)
    y = dens.y
    vals = np.asarray(rhs(y) if callable(rhs) else rhs, dtype=float)
    if vals.shape != y.shape or not np.all(np.isfinite(vals)):
        raise AveragingError("right-hand side must be finite on the density grid")
    mean = dens.grid_average(vals)
    rhs_c = vals - mean
    if abs(dens.grid_average(rhs_c)) >= 1e-12 * max(1.0, np.max(np.abs(vals))):
        raise AveragingError("solvability condition violated after centering")
    b, a = spec.b(y), spec.a(y)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if np.max(np.abs(rhs_c)) <= rounding * scale:
        return _zero_solution(y, np.zeros_like(y), mean, b, a)
    k = dens.mode_index
    f = rhs_c * dens.pdf
    # left tail from the left end, right tail from the right end: no cancellation
    flux = np.empty_like(y)
    flux[: k + 1] = _cumulative(f, y, 0, k)
    flux[k:] = _cumulative(f, y, len(y) - 1, k)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dtheta = 2.0 * flux / (a**2 * dens.pdf)
    dtheta = np.where(np.isfinite(dtheta), dtheta, 0.0)
    theta = np.empty_like(y)
    theta[k:] = _cumulative(dtheta, y, k, len(y) - 1)
    theta[: k + 1] = _cumulative(dtheta, y, k, 0)
    theta -= dens.grid_average(theta)
    d2theta = 2.0 * (rhs_c - b * dtheta) / a**2
    return PoissonSolution(y, theta, dtheta, d2theta, rhs_c, mean, b, a)


def _cumulative(f, y, start: int, stop: int):
    """``int_{y[start]}^{y[j]} f`` for ``j`` between ``start`` and ``stop``, in index order.

    Uses the antiderivative of the interpolating cubic spline, whose error is
    smooth in ``j`` (alternating Simpson panels leave a sawtooth).
    """
    if start <= stop:
        seg = slice(start, stop + 1)
        return CubicSpline(y[seg], f[seg]).antiderivative()(y[seg])
    seg = slice(stop, start + 1)
    # integrate in u = -y so the abscissa increases
    u, g = -y[seg][::-1], f[seg][::-1]
    return -CubicSpline(u, g).antiderivative()(u)[::-1]


THETA_NAMES = ("theta",) + tuple(f"theta{i}" for i in range(1, 12))
_STENCIL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


@dataclass
class ThetaBundle:
    """Poisson solutions and averaged coefficients at one slow-factor level ``z``."""

    z: float
    lam_bar: float
    lam_hat: float
    lam_bar_p: float
    lam_bar_pp: float
    lam_hat_p: float
    B: float
    B_p: float
    B1: float
    B_parts: float
    thetas: dict
    dtheta_z: np.ndarray
    dtheta_yz: np.ndarray
    averages: dict
    density: InvariantDensity = field(repr=False)

    def __getitem__(self, name: str) -> PoissonSolution:
        return self.thetas[name]


def sharpe_averages(spec: ModelSpec, z: float, density: InvariantDensity) -> dict:
    """lam_bar, lam_hat and their z-derivatives through the catalog partials."""
    lam = lambda y: spec.lam(y, z)
    lz = lambda y: spec.lam_dz(y, z)
    lzz = lambda y: spec.lam_dzz(y, z)
    lb = np.sqrt(average(lambda y: lam(y) ** 2, density))
    if lb == 0.0:
        # sqrt of the square average is not differentiable at zero; no Sharpe ratio, no slope
        return {"lam_bar": 0.0, "lam_bar_p": 0.0, "lam_bar_pp": 0.0,
                "lam_hat": 0.0, "lam_hat_p": average(lz, density)}
    lbp = average(lambda y: lam(y) * lz(y), density) / lb
    lbpp = (average(lambda y: lz(y) ** 2 + lam(y) * lzz(y), density) - lbp**2) / lb
    return {"lam_bar": lb, "lam_bar_p": lbp, "lam_bar_pp": lbpp,
            "lam_hat": average(lam, density), "lam_hat_p": average(lz, density)}


def _theta_core(spec, dens, z):
    y = dens.y
    lam = spec.lam(y, z)
    th = solve_poisson(lam**2, spec, dens)
    B = dens.grid_average(lam * spec.a(y) * th.dtheta)
    return th, B


def theta_family(spec: ModelSpec, z: float, density: InvariantDensity | None = None,
                 h_z: float = 1e-3) -> ThetaBundle:
    """All centered ``theta_i`` and the averaged coefficients at level ``z``."""
    dens = density or invariant_density(spec)
    y = dens.y
    a = spec.a(y)
    lam = spec.lam(y, z)
    sc = sharpe_averages(spec, z, dens)
    th, B = _theta_core(spec, dens, z)
    side = [_theta_core(spec, dens, z + k * h_z) for k in (-2, -1, 1, 2)]
    stack = [side[0], side[1], (th, B), side[2], side[3]]
    dtheta_z = sum(w * s[0].theta for w, s in zip(_STENCIL, stack)) / h_z
    dtheta_yz = sum(w * s[0].dtheta for w, s in zip(_STENCIL, stack)) / h_z
    B_p = float(sum(w * s[1] for w, s in zip(_STENCIL, stack)) / h_z)

    t1 = solve_poisson(lam * a * th.dtheta, spec, dens)
    t2 = solve_poisson(lam, spec, dens)
    B1 = dens.grid_average(a * lam * t1.dtheta)
    thetas = {
        "theta": th,
        "theta1": t1,
        "theta2": t2,
        "theta3": solve_poisson(a * lam * t1.dtheta, spec, dens),
        "theta4": solve_poisson(th.theta * lam**2, spec, dens),
        "theta5": solve_poisson(th.theta, spec, dens),
        "theta6": solve_poisson(dtheta_yz, spec, dens),
        "theta7": solve_poisson(th.dtheta, spec, dens),
        "theta8": solve_poisson(a * lam * t2.dtheta, spec, dens),
        "theta9": solve_poisson(a**2 * th.dtheta**2, spec, dens),
        "theta10": solve_poisson(a * dtheta_yz, spec, dens),
        "theta11": solve_poisson(a * th.dtheta, spec, dens),
    }
    avg = dens.grid_average
    averages = {
        "theta_lam2": avg(th.theta * lam**2),
        "theta": avg(th.theta),
        "a2_dtheta2": avg(a**2 * th.dtheta**2),
        "a_lam_dtheta2": avg(a * lam * t2.dtheta),
        "dtheta": avg(th.dtheta),
        "dtheta_yz": avg(dtheta_yz),
        "a_dtheta_yz": avg(a * dtheta_yz),
        "a_dtheta": avg(a * th.dtheta),
    }
    # <lam a theta'> = -<theta (a lam_y - lam a' + 2 lam b / a)> by parts against Phi
    weight = lambda yy: (spec.a(yy) * spec.lam_dy(yy, z) - spec.lam(yy, z) * spec.a_y(yy)
                         + 2.0 * spec.lam(yy, z) * spec.b(yy) / spec.a(yy))
    B_parts = -average(lambda yy: th(yy) * weight(yy), dens) if not th.is_zero else 0.0
    return ThetaBundle(z=float(z), B=float(B), B_p=B_p, B1=float(B1), B_parts=float(B_parts),
                       thetas=thetas, dtheta_z=dtheta_z, dtheta_yz=dtheta_yz,
                       averages=averages, density=dens, **sc)
