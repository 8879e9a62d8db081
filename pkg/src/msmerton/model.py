"""Multiscale factor model: coefficient catalog, correlations and validation.

The stock has Sharpe ratio ``lam(y, z) = mu / sigma`` driven by a fast
factor ``dY = b/eps dt + a/sqrt(eps) dW^Y`` and a slow factor
``dZ = delta c dt + sqrt(delta) g dW^Z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CATALOG = ("ou_tanh", "ou_affine")

_DEFAULTS = {
    "kappa_y": 1.0,
    "m_y": 0.0,
    "a": float(np.sqrt(2.0)),
    "kappa_z": 1.0,
    "m_z": 0.0,
    "g": 0.5,
    "lam0": 0.3,
    "lam_y": 0.2,
    "lam_z": 0.0,
    "sigma0": 0.2,
    "sigma_y": 0.0,
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationTriple:
    rho1: float = 0.0
    rho2: float = 0.0
    rho12: float = 0.0

    @property
    def proxy(self) -> float:
        r1, r2, r12 = self.rho1, self.rho2, self.rho12
        return 1.0 + 2.0 * r1 * r2 * r12 - r1**2 - r2**2 - r12**2

    def matrix(self) -> np.ndarray:
        r1, r2, r12 = self.rho1, self.rho2, self.rho12
        return np.array([[1.0, r1, r2], [r1, 1.0, r12], [r2, r12, 1.0]])


@dataclass(frozen=True)
class ValidityReport:
    proxy: float
    passed: bool
    reason: str = ""


def validate_correlations(t: CorrelationTriple) -> ValidityReport:
    for name in ("rho1", "rho2", "rho12"):
        if not abs(getattr(t, name)) < 1.0:
            return ValidityReport(t.proxy, False, f"|{name}| must be < 1")
    if not t.proxy > 0.0:
        return ValidityReport(t.proxy, False, "correlation matrix not positive definite")
    return ValidityReport(t.proxy, True)


@dataclass(frozen=True)
class CoefficientValues:
    mu: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    b: np.ndarray
    a: np.ndarray
    c: np.ndarray
    g: np.ndarray
    lam_y: np.ndarray
    lam_z: np.ndarray
    a_y: np.ndarray
    g_z: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model description.  All coefficient maps are vectorised."""

    catalog_id: str
    params: dict
    correlations: CorrelationTriple
    eps: float
    delta: float
    T: float
    n_std: float = 8.0
    meta: dict = field(default_factory=dict, compare=False)

    def __hash__(self):
        return hash((self.catalog_id, tuple(sorted(self.params.items())), self.correlations,
                     self.eps, self.delta, self.T, self.n_std))

    def _p(self, key):
        return self.params[key]

    @property
    def rho1(self):
        return self.correlations.rho1

    @property
    def rho2(self):
        return self.correlations.rho2

    @property
    def rho12(self):
        return self.correlations.rho12

    # fast factor ------------------------------------------------------------
    def b(self, y):
        return self._p("kappa_y") * (self._p("m_y") - np.asarray(y, dtype=float))

    def b_y(self, y):
        return np.full(np.shape(y), -self._p("kappa_y"))

    def a(self, y):
        return np.full(np.shape(y), self._p("a"))

    def a_y(self, y):
        return np.zeros(np.shape(y))

    # slow factor ------------------------------------------------------------
    def c(self, z):
        return self._p("kappa_z") * (self._p("m_z") - np.asarray(z, dtype=float))

    def g(self, z):
        return np.full(np.shape(z), self._p("g"))

    def g_z(self, z):
        return np.zeros(np.shape(z))

    # Sharpe ratio -----------------------------------------------------------
    def _shape_y(self, y):
        y = np.asarray(y, dtype=float)
        if self.catalog_id == "ou_affine":
            return y, np.ones_like(y), np.zeros_like(y)
        th = np.tanh(y)
        return th, 1.0 - th**2, -2.0 * th * (1.0 - th**2)

    def lam(self, y, z):
        fy = self._shape_y(y)[0]
        return self._p("lam0") + self._p("lam_z") * np.tanh(z) + self._p("lam_y") * fy

    def lam_dy(self, y, z):
        return self._p("lam_y") * self._shape_y(y)[1] + 0.0 * np.asarray(z, dtype=float)

    def lam_dyy(self, y, z):
        return self._p("lam_y") * self._shape_y(y)[2] + 0.0 * np.asarray(z, dtype=float)

    def lam_dz(self, y, z):
        th = np.tanh(z)
        return self._p("lam_z") * (1.0 - th**2) + 0.0 * np.asarray(y, dtype=float)

    def lam_dzz(self, y, z):
        th = np.tanh(z)
        return -2.0 * self._p("lam_z") * th * (1.0 - th**2) + 0.0 * np.asarray(y, dtype=float)

    def sigma(self, y, z):
        return self._p("sigma0") * np.exp(self._p("sigma_y") * np.tanh(y)) + 0.0 * np.asarray(z, dtype=float)

    def mu(self, y, z):
        return self.lam(y, z) * self.sigma(y, z)

    # domain -----------------------------------------------------------------
    @property
    def y_mean(self) -> float:
        return self._p("m_y")

    @property
    def y_std(self) -> float:
        return self._p("a") / np.sqrt(2.0 * self._p("kappa_y"))

    @property
    def z_mean(self) -> float:
        return self._p("m_z")

    @property
    def z_std(self) -> float:
        kz = self._p("kappa_z")
        return self._p("g") / np.sqrt(2.0 * kz) if kz > 0 else self._p("g")

    @property
    def y_domain(self):
        return (self.y_mean - self.n_std * self.y_std, self.y_mean + self.n_std * self.y_std)

    @property
    def z_domain(self):
        return (self.z_mean - self.n_std * self.z_std, self.z_mean + self.n_std * self.z_std)

    @property
    def fast_is_gaussian(self) -> bool:
        return True

    def with_scales(self, eps=None, delta=None) -> "ModelSpec":
        return replace(self, eps=self.eps if eps is None else eps,
                       delta=self.delta if delta is None else delta)


def eval_coefficients(spec: ModelSpec, y, z) -> CoefficientValues:
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    (ylo, yhi), (zlo, zhi) = spec.y_domain, spec.z_domain
    if np.any((y < ylo) | (y > yhi)) or np.any((z < zlo) | (z > zhi)):
        raise ModelError("point outside the working domain")
    sig = spec.sigma(y, z)
    lam = spec.lam(y, z)
    return CoefficientValues(
        mu=lam * sig, sigma=sig, lam=lam, b=spec.b(y), a=spec.a(y), c=spec.c(z), g=spec.g(z),
        lam_y=spec.lam_dy(y, z), lam_z=spec.lam_dz(y, z), a_y=spec.a_y(y), g_z=spec.g_z(z),
    )


def _fd_consistency(spec: ModelSpec, n: int = 50, rtol: float = 1e-6) -> float:
    """Worst relative mismatch between analytic partials and central differences."""
    rng = np.random.default_rng(0)
    ylo, yhi = spec.y_domain
    zlo, zhi = spec.z_domain
    y = rng.uniform(ylo / 2, yhi / 2, n)
    z = rng.uniform(zlo / 2, zhi / 2, n)
    h = 1e-5
    pairs = [
        (spec.lam_dy(y, z), (spec.lam(y + h, z) - spec.lam(y - h, z)) / (2 * h)),
        (spec.lam_dz(y, z), (spec.lam(y, z + h) - spec.lam(y, z - h)) / (2 * h)),
        (spec.lam_dyy(y, z), (spec.lam_dy(y + h, z) - spec.lam_dy(y - h, z)) / (2 * h)),
        (spec.lam_dzz(y, z), (spec.lam_dz(y, z + h) - spec.lam_dz(y, z - h)) / (2 * h)),
        (spec.b_y(y), (spec.b(y + h) - spec.b(y - h)) / (2 * h)),
        (spec.a_y(y), (spec.a(y + h) - spec.a(y - h)) / (2 * h)),
        (spec.g_z(z), (spec.g(z + h) - spec.g(z - h)) / (2 * h)),
    ]
    worst = 0.0
    for exact, fd in pairs:
        scale = np.maximum(np.abs(exact), 1.0)
        worst = max(worst, float(np.max(np.abs(exact - fd) / scale)))
    return worst


def instantiate_model(config: dict) -> ModelSpec:
    """Build a validated :class:`ModelSpec` from a ``[model]`` table."""
    cfg = dict(config)
    cat = cfg.pop("catalog", "ou_tanh")
    if cat not in CATALOG:
        raise ModelError(f"unknown catalog id {cat!r}")
    corr = CorrelationTriple(float(cfg.pop("rho1", 0.0)), float(cfg.pop("rho2", 0.0)),
                             float(cfg.pop("rho12", 0.0)))
    rep = validate_correlations(corr)
    if not rep.passed:
        raise ModelError(f"invalid correlations: {rep.reason} (proxy={rep.proxy:.6g})")
    eps = float(cfg.pop("eps", 0.01))
    delta = float(cfg.pop("delta", 0.0))
    T = float(cfg.pop("T", 1.0))
    n_std = float(cfg.pop("n_std", 8.0))
    params = dict(_DEFAULTS)
    for k, v in cfg.items():
        if k not in params:
            raise ModelError(f"unknown model parameter {k!r}")
        params[k] = float(v)
    if eps <= 0 or delta < 0 or T <= 0:
        raise ModelError("need eps > 0, delta >= 0, T > 0")
    if params["kappa_y"] <= 0 or params["a"] <= 0 or params["sigma0"] <= 0:
        raise ModelError("need kappa_y > 0, a > 0, sigma0 > 0")
    if params["kappa_z"] < 0 or params["g"] < 0:
        raise ModelError("need kappa_z >= 0, g >= 0")
    if cat == "ou_affine" and params["lam_y"] != 0.0:
        raise ModelError("Sharpe ratio lam0 + lam_y*y is unbounded in y")
    spec = ModelSpec(cat, params, corr, eps, delta, T, n_std)
    ylo, yhi = spec.y_domain
    zlo, zhi = spec.z_domain
    yy, zz = np.meshgrid(np.linspace(ylo, yhi, 41), np.linspace(zlo, zhi, 41))
    if np.any(spec.sigma(yy, zz) <= 0) or np.any(spec.a(yy) <= 0):
        raise ModelError("sigma and a must be positive on the working domain")
    worst = _fd_consistency(spec)
    if worst > 1e-6:
        raise ModelError(f"analytic partials disagree with finite differences ({worst:.3g})")
    spec.meta["fd_consistency"] = worst
    return spec
