"""Exact benchmark for power utility with one fast factor, and HJB residual probes.

With ``V = U(x) Psi(t, y)**eta`` and ``eta = gamma / (gamma + (1 - gamma) rho1**2)``
the fully nonlinear equation becomes linear in ``Psi``:

    Psi_t + L_y Psi / eps + k1 a lam Psi_y / sqrt(eps) + k2 lam**2 Psi = 0,
    Psi(T, y) = 1,   k1 = (1 - gamma) rho1 / gamma,   k2 = (1 - gamma) / (2 gamma eta).

For an OU fast factor ``L_y`` is diagonal in the Hermite basis orthonormal under
the invariant law, so the solve is ``expm`` of a small Galerkin matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import roots_hermitenorm

from .model import ModelSpec


class OracleError(ValueError):
    pass


def distortion_exponent(gamma: float, rho1: float) -> float:
    return gamma / (gamma + (1.0 - gamma) * rho1**2)


def _basis(xi, n):
    """Orthonormal ``He_k(xi) / sqrt(k!)`` and their ``xi``-derivatives, shape (n, len(xi))."""
    xi = np.asarray(xi, float)
    vals = np.empty((n,) + xi.shape)
    vals[0] = 1.0
    if n > 1:
        vals[1] = xi
    for k in range(2, n):
        vals[k] = (xi * vals[k - 1] - np.sqrt(k - 1) * vals[k - 2]) / np.sqrt(k)
    d = np.zeros_like(vals)
    for k in range(1, n):
        d[k] = np.sqrt(k) * vals[k - 1]
    return vals, d


@dataclass(frozen=True)
class OracleField:
    gamma: float
    eps: float
    eta: float
    T: float
    y_mean: float
    y_std: float
    generator: np.ndarray
    n_modes: int

    def coefficients(self, t):
        return expm((self.T - float(t)) * self.generator)[:, 0]

    def psi(self, t, y, order: int = 0):
        """``Psi`` (order 0), ``Psi_y`` (1), ``Psi_yy`` (2) or ``Psi_t`` (``"t"``) at fixed ``t``."""
        c = self.coefficients(t)
        xi = (np.asarray(y, float) - self.y_mean) / self.y_std
        if order == "t":
            c = -self.generator @ c
            order = 0
        vals, d = _basis(xi, self.n_modes)
        if order == 0:
            return np.tensordot(c, vals, 1)
        if order == 1:
            return np.tensordot(c, d, 1) / self.y_std
        if order == 2:
            dd = np.zeros_like(vals)
            for k in range(2, self.n_modes):
                dd[k] = np.sqrt(k * (k - 1)) * vals[k - 2]
            return np.tensordot(c, dd, 1) / self.y_std**2
        raise OracleError("order must be 0, 1, 2 or 't'")

    def value(self, t, x, y):
        g = self.gamma
        u = np.asarray(x, float) ** (1 - g) / (1 - g)
        return u * self.psi(t, y) ** self.eta

    def partials(self, t, x, y) -> dict:
        """``V`` and its ``t, x, xx, y, yy, xy`` partials (``z``-partials are zero)."""
        g, eta = self.gamma, self.eta
        x = np.asarray(x, float)
        u = x ** (1 - g) / (1 - g)
        ux, uxx = x ** (-g), -g * x ** (-g - 1)
        p, py, pyy, pt = (self.psi(t, y, o) for o in (0, 1, 2, "t"))
        f = p**eta
        fy = eta * p ** (eta - 1) * py
        fyy = eta * p ** (eta - 1) * pyy + eta * (eta - 1) * p ** (eta - 2) * py**2
        ft = eta * p ** (eta - 1) * pt
        zero = np.zeros(np.broadcast(u, f).shape)
        return {"": u * f, "t": u * ft, "x": ux * f, "xx": uxx * f, "y": u * fy,
                "yy": u * fyy, "xy": ux * fy, "z": zero, "zz": zero, "xz": zero, "yz": zero}


def solve_distortion(gamma: float, spec: ModelSpec, eps: float, n_modes: int = 256,
                     n_quad: int | None = None, z: float | None = None, validate: bool = True) -> OracleField:
    """Distortion-transform value for power utility ``x**(1-gamma)/(1-gamma)``, ``delta = 0``."""
    if gamma == 1.0:
        raise OracleError("gamma = 1 is log utility; the power distortion transform does not apply")
    if gamma <= 0:
        raise OracleError("gamma must be positive")
    if spec.catalog_id not in ("ou_tanh", "ou_affine"):
        raise OracleError("oracle needs an OU fast factor")
    if not abs(spec.rho1) < 1:
        raise OracleError("|rho1| must be < 1")
    z = spec.z_mean if z is None else z
    eta = distortion_exponent(gamma, spec.rho1)
    k1 = (1 - gamma) * spec.rho1 / gamma
    k2 = (1 - gamma) / (2 * gamma * eta)
    m, s = spec.y_mean, spec.y_std
    kappa = spec.params["kappa_y"]
    nodes, w = roots_hermitenorm(n_quad or 2 * n_modes + 40)
    w = w / np.sqrt(2 * np.pi)
    y = m + s * nodes
    vals, d = _basis(nodes, n_modes)
    lam = spec.lam(y, z)
    a = spec.a(y)
    # Galerkin projections <h_i, op h_j> under the invariant Gaussian law
    mult = (vals * w * lam**2) @ vals.T
    drift = (vals * w * a * lam) @ d.T / s
    gen = (-kappa * np.diag(np.arange(n_modes)) / eps + k1 * drift / np.sqrt(eps) + k2 * mult)
    field = OracleField(gamma, eps, eta, spec.T, m, s, gen, n_modes)
    if validate:
        ys = m + 4 * s * np.linspace(-1, 1, 9)
        tol = 1e-8
        for t in (0.0, 0.5 * spec.T):
            res = hjb_residual(field.partials(t, 1.0, ys), spec, ys, z, eps, 0.0)
            scale = np.max(np.abs(field.value(t, 1.0, ys)))
            if np.max(np.abs(res)) > tol * scale:
                raise OracleError(f"oracle fails the HJB residual gate ({np.max(np.abs(res)):.3g})")
    return field


def hjb_residual(V: dict, spec: ModelSpec, y, z, eps: float, delta: float):
    """``sup_pi Q^pi[V]`` from partials ``V`` via the quadratic maximiser in ``pi``."""
    if np.any(np.asarray(V["xx"]) >= 0):
        raise OracleError("candidate is not concave in x")
    y = np.asarray(y, float)
    lam = spec.lam(y, z)
    a, b = spec.a(y), spec.b(y)
    g, c = spec.g(np.asarray(z, float)), spec.c(np.asarray(z, float))
    lin = V["t"]
    if eps > 0:
        lin = lin + (b * V["y"] + 0.5 * a**2 * V["yy"]) / eps
        lin = lin + np.sqrt(delta / eps) * spec.rho12 * a * g * V["yz"]
    lin = lin + delta * (c * V["z"] + 0.5 * g**2 * V["zz"])
    A = lam * V["x"] + np.sqrt(delta) * spec.rho2 * g * V["xz"]
    if eps > 0:
        A = A + spec.rho1 * a * V["xy"] / np.sqrt(eps)
    return lin - A**2 / (2 * V["xx"])


def merton_partials(gamma: float, lam: float, T: float, t, x) -> dict:
    """Closed-form power Merton value with constant Sharpe ratio, as a partial dict."""
    x = np.asarray(x, float)
    tau = T - np.asarray(t, float)
    k = (1 - gamma) / (2 * gamma) * lam**2
    f = np.exp(k * tau)
    u = x ** (1 - gamma) / (1 - gamma)
    zero = np.zeros(np.broadcast(u, f).shape)
    return {"": u * f, "t": -k * u * f, "x": x ** (-gamma) * f,
            "xx": -gamma * x ** (-gamma - 1) * f, "y": zero, "yy": zero, "xy": zero,
            "z": zero, "zz": zero, "xz": zero, "yz": zero}


def dump_csv(field: OracleField, path, ts, xs, ys) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,V\n")
        for t in ts:
            for x in xs:
                vals = field.value(t, x, np.asarray(ys, float))
                for y, v in zip(ys, vals):
                    fh.write(f"{t:.12g},{x:.12g},{y:.12g},{v:.12g}\n")

