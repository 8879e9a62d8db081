"""Sub- and super-solution candidates and their grid verification.

``V(+/-) = v0 + sqrt(eps) v10 + sqrt(delta) v01 + eps w20 + eps^1.5 w30
+ eps sqrt(delta) w21 +/- [(2T - t)(eps N_A + delta N_B + sqrt(eps delta) N_C)
+ eps^2 F + eps^1.5 sqrt(delta) H + eps delta G]`` with ``N_i = C_i D1 v0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import algebra as A
from .expansion import (D1CUBE, D1HD2, D1M, EXPANSION_TERMS, HD1, P01, P10,
                        TWO_T_MINUS_t, ExpansionBundle, Term, add_partials,
                        _zero_partials)

VARIANTS = ("sub", "super")
CONSTANTS = ("A", "B", "C")


class VerificationError(RuntimeError):
    pass


class ConcavityError(VerificationError):
    pass


# ------------------------------------------------------------------ terms ---

def _n_block():
    poly = TWO_T_MINUS_t * D1M
    return [Term("N", (2, 0), poly, lambda s: 1.0, None, "A"),
            Term("N", (0, 2), poly, lambda s: 1.0, None, "B"),
            Term("N", (1, 1), poly, lambda s: 1.0, None, "C")]


_C_POLY = TWO_T_MINUS_t * HD1
_D1P10 = A.D1(P10)
_D1P10L = A.D1(A.dlam(P10))
_D1P01 = A.D1(P01)
_D1P01L = A.D1(A.dlam(P01))
_D1ML = A.dlam(D1M)
_DX_D1M = A.dx(D1M)
_V0XZ = A.dx(A.dlam(A.M))          # times lam_bar'
_INV_VXX = -A.k[1] * A.ie          # 1 / M_xx
_Y_HAT = -A.k[1] * A.dx(A.dx(P10)) - A.dx(P10)   # per unit c10
_Z_HAT = -A.k[1] * A.dx(A.dx(P01)) - A.dx(P01)   # per unit c01


def _sub_terms():
    F = [
        Term("F", (4, 0), HD1, lambda s: -0.5, "theta4"),
        Term("F", (4, 0), A.lam**2 * HD1, lambda s: 0.5, "theta5"),
        Term("F", (4, 0), A.tau * D1HD2, lambda s: 0.5 * s.rho1**2 * s.B, "theta1"),
        Term("F", (4, 0), D1CUBE, lambda s: 0.5 * s.rho1**2, "theta3"),
        Term("F", (4, 0), _C_POLY, lambda s: -1.0, "theta", "A"),
    ]
    G = [
        Term("G", (2, 2), _D1P01, lambda s: s.rho2 * s.g * s.c01p, "theta2"),
        Term("G", (2, 2), _D1P01L, lambda s: s.rho2 * s.g * s.c01 * s.lbp, "theta2"),
        Term("G", (2, 2), _C_POLY, lambda s: -1.0, "theta", "B"),
    ]
    H = [
        Term("H", (3, 1), _D1P10, lambda s: s.rho2 * s.g * s.c10p, "theta2"),
        Term("H", (3, 1), _D1P10L, lambda s: s.rho2 * s.g * s.c10 * s.lbp, "theta2"),
        Term("H", (3, 1), D1M, lambda s: -0.5 * s.rho12 * s.g, "theta10"),
        Term("H", (3, 1), _D1ML, lambda s: -0.5 * s.rho12 * s.g * s.lbp, "theta11"),
        Term("H", (3, 1), A.tau**2 * A.lam * D1HD2,
             lambda s: -0.5 * s.rho1 * s.rho2 * s.lh * s.lbp * s.g, "theta1"),
        Term("H", (3, 1), A.tau * A.lam * D1CUBE,
             lambda s: -s.rho1 * s.rho2 * s.g * s.lbp, "theta8"),
        Term("H", (3, 1), _C_POLY, lambda s: -1.0, "theta", "C"),
    ]
    return F + G + H


def _super_terms():
    half_inv = _INV_VXX / 2
    F = [
        Term("F", (4, 0), A.tau * D1HD2, lambda s: -0.5 * s.rho1**2 * s.B, "theta1"),
        Term("F", (4, 0), D1CUBE, lambda s: -0.5 * s.rho1**2, "theta3"),
        Term("F", (4, 0), HD1, lambda s: 0.5, "theta4"),
        Term("F", (4, 0), A.lam**2 * HD1, lambda s: -0.5, "theta5"),
        Term("F", (4, 0), _C_POLY, lambda s: -1.0, "theta", "A"),
        Term("F", (4, 0), half_inv * _Y_HAT**2, lambda s: s.c10**2, "theta"),
        Term("F", (4, 0), half_inv * _Y_HAT * _DX_D1M, lambda s: s.rho1 * s.c10, "theta1"),
        Term("F", (4, 0), half_inv * _DX_D1M**2, lambda s: 0.25 * s.rho1**2, "theta9"),
    ]
    G = [
        Term("G", (2, 2), _D1P01, lambda s: -s.rho2 * s.g * s.c01p, "theta2"),
        Term("G", (2, 2), _D1P01L, lambda s: -s.rho2 * s.g * s.c01 * s.lbp, "theta2"),
        Term("G", (2, 2), _C_POLY, lambda s: -1.0, "theta", "B"),
        Term("G", (2, 2), half_inv * _Z_HAT**2, lambda s: s.c01**2, "theta"),
        Term("G", (2, 2), half_inv * _Z_HAT * _V0XZ,
             lambda s: -2.0 * s.rho2 * s.g * s.c01 * s.lbp, "theta2"),
    ]
    H = [
        Term("H", (3, 1), D1M, lambda s: 0.5 * s.rho12 * s.g, "theta10"),
        Term("H", (3, 1), _D1ML, lambda s: 0.5 * s.rho12 * s.g * s.lbp, "theta11"),
        Term("H", (3, 1), A.tau**2 * A.lam * D1HD2,
             lambda s: 0.5 * s.rho1 * s.rho2 * s.lh * s.lbp * s.g, "theta1"),
        Term("H", (3, 1), _D1P10, lambda s: -s.rho2 * s.g * s.c10p, "theta2"),
        Term("H", (3, 1), _D1P10L, lambda s: -s.rho2 * s.g * s.c10 * s.lbp, "theta2"),
        Term("H", (3, 1), A.tau * A.lam * D1CUBE,
             lambda s: s.rho1 * s.rho2 * s.g * s.lbp, "theta8"),
        Term("H", (3, 1), _C_POLY, lambda s: -1.0, "theta", "C"),
        Term("H", (3, 1), _INV_VXX * _Y_HAT * _Z_HAT, lambda s: s.c10 * s.c01, "theta"),
        Term("H", (3, 1), _INV_VXX * _Y_HAT * _V0XZ,
             lambda s: -s.rho2 * s.g * s.c10 * s.lbp, "theta2"),
        Term("H", (3, 1), _INV_VXX * _Z_HAT * _DX_D1M,
             lambda s: 0.5 * s.rho1 * s.c01, "theta1"),
        Term("H", (3, 1), _INV_VXX * _V0XZ * _DX_D1M,
             lambda s: -0.5 * s.rho1 * s.rho2 * s.g * s.lbp, "theta11"),
    ]
    return F + G + H


CORRECTOR_TERMS = {"sub": tuple(_sub_terms()), "super": tuple(_super_terms())}
N_TERMS = tuple(_n_block())


@dataclass(frozen=True)
class CorrectorSet:
    variant: str
    constants: dict
    terms: tuple

    @property
    def sign(self) -> float:
        return -1.0 if self.variant == "sub" else 1.0


def build_correctors(variant: str, constants=(1.0, 1.0, 1.0)) -> CorrectorSet:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    cs = dict(zip(CONSTANTS, (float(c) for c in constants)))
    return CorrectorSet(variant, cs, N_TERMS + CORRECTOR_TERMS[variant])


# --------------------------------------------------------------- grid slab ---

@dataclass
class Slab:
    """Term partials at one slow level ``z`` on a ``(t, x) x y`` product grid."""

    z: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    groups: dict
    R: np.ndarray
    lam: np.ndarray
    coeffs: dict
    rho: tuple
    z_derivs: bool = True
    meta: dict = field(default_factory=dict)

    def orders(self, variant: str, constants) -> dict:
        """``{(p, q): partials}`` of the candidate with the given constants."""
        cs = dict(zip(CONSTANTS, constants)) if not isinstance(constants, dict) else constants
        sign = -1.0 if variant == "sub" else 1.0
        out: dict = {}
        for (label, order, const, tag), part in self.groups.items():
            if tag not in ("expansion", variant):
                continue
            w = 1.0 if tag == "expansion" else sign
            if const is not None:
                w *= cs[const]
            acc = out.setdefault(order, _zero_partials(part[""].shape))
            add_partials(acc, part, w)
        return out


def build_slab(bundle: ExpansionBundle, t, x, y, z: float, variants=VARIANTS,
               z_derivs: bool = True) -> Slab:
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    groups = {}
    sets = [("expansion", EXPANSION_TERMS)]
    for v in variants:
        sets.append((v, N_TERMS + CORRECTOR_TERMS[v]))
    for tag, terms in sets:
        for key, part in bundle.grouped_partials(terms, t, x, y, z, z_derivs).items():
            groups[key + (tag,)] = part
    spec = bundle.spec
    R = bundle.merton(z).R(t, x)[..., None]
    zz = np.array(z)
    coeffs = {"b": spec.b(y), "a": spec.a(y), "c": float(spec.c(zz)), "g": float(spec.g(zz)),
              "sigma": spec.sigma(y, z)}
    return Slab(float(z), t, x, y, groups, R, spec.lam(y, z), coeffs,
                (spec.rho1, spec.rho2, spec.rho12), z_derivs)


def weights(orders, eps: float, delta: float) -> dict:
    return {o: np.sqrt(eps) ** o[0] * np.sqrt(delta) ** o[1] for o in orders}


def total_partials(order_parts: dict, eps: float, delta: float) -> dict:
    shape = next(iter(order_parts.values()))[""].shape
    acc = _zero_partials(shape)
    for o, w in weights(order_parts, eps, delta).items():
        add_partials(acc, order_parts[o], w)
    return acc


# ------------------------------------------------------------- operators ---

def _pieces_pi0(slab: Slab, V: dict) -> list:
    r1, r2, r12 = slab.rho
    b, a, c, g = (slab.coeffs[k] for k in ("b", "a", "c", "g"))
    lam, R = slab.lam, slab.R
    return [
        ((0, 0), V["t"] + 0.5 * lam**2 * R**2 * V["xx"] + lam**2 * R * V["x"]),
        ((-2, 0), b * V["y"] + 0.5 * a**2 * V["yy"]),
        ((-1, 1), r12 * a * g * V["yz"]),
        ((0, 2), c * V["z"] + 0.5 * g**2 * V["zz"]),
        ((-1, 0), r1 * a * lam * R * V["xy"]),
        ((0, 1), r2 * g * lam * R * V["xz"]),
    ]


def q_pi0_orders(slab: Slab, order_parts: dict) -> dict:
    """Coefficients of ``Q^{pi0}[V]`` keyed by ``(p, q)`` powers of sqrt(eps), sqrt(delta)."""
    out: dict = {}
    for o, V in order_parts.items():
        for (dp, dq), val in _pieces_pi0(slab, V):
            key = (o[0] + dp, o[1] + dq)
            out[key] = out.get(key, 0.0) + val
    return out


def q_pi0_apply(slab: Slab, order_parts: dict, eps: float, delta: float) -> np.ndarray:
    V = total_partials(order_parts, eps, delta)
    total = 0.0
    for (dp, dq), val in _pieces_pi0(slab, V):
        total = total + np.sqrt(eps) ** dp * np.sqrt(delta) ** dq * val
    return total


def _a_term(slab: Slab, V: dict, eps: float, delta: float):
    r1, r2, _ = slab.rho
    a, g = slab.coeffs["a"], slab.coeffs["g"]
    return slab.lam * V["x"] + r1 * a * V["xy"] / np.sqrt(eps) + np.sqrt(delta) * r2 * g * V["xz"]


def _linear_part(slab: Slab, V: dict, eps: float, delta: float):
    r1, r2, r12 = slab.rho
    b, a, c, g = (slab.coeffs[k] for k in ("b", "a", "c", "g"))
    return (V["t"] + (b * V["y"] + 0.5 * a**2 * V["yy"]) / eps
            + np.sqrt(delta / eps) * r12 * a * g * V["yz"]
            + delta * (c * V["z"] + 0.5 * g**2 * V["zz"]))


def pi_star(slab: Slab, order_parts: dict, eps: float, delta: float) -> np.ndarray:
    V = total_partials(order_parts, eps, delta)
    if np.any(V["xx"] >= 0):
        raise ConcavityError("V_xx >= 0: pi* is not a maximizer")
    return -_a_term(slab, V, eps, delta) / (slab.coeffs["sigma"] * V["xx"])


def q_pi_apply(slab: Slab, order_parts: dict, eps: float, delta: float, pi) -> np.ndarray:
    """``Q^pi[V]`` for an arbitrary amount ``pi`` held in the stock."""
    V = total_partials(order_parts, eps, delta)
    sig = slab.coeffs["sigma"]
    ps = pi * sig
    return (_linear_part(slab, V, eps, delta) + 0.5 * ps**2 * V["xx"]
            + ps * _a_term(slab, V, eps, delta))


def q_hat_apply(slab: Slab, order_parts: dict, eps: float, delta: float):
    """``(sup_pi Q^pi[V], max V_xx)``; raises when ``V`` is not concave in ``x``."""
    V = total_partials(order_parts, eps, delta)
    vxx_max = float(np.max(V["xx"]))
    if vxx_max >= 0:
        raise ConcavityError("V_xx >= 0 on the grid")
    A_ = _a_term(slab, V, eps, delta)
    return _linear_part(slab, V, eps, delta) - A_**2 / (2 * V["xx"]), vxx_max


# truncated bivariate series for the diagnostics of Q-hat ------------------

def _smul(a: dict, b: dict, top: int) -> dict:
    out: dict = {}
    for oa, va in a.items():
        for ob, vb in b.items():
            o = (oa[0] + ob[0], oa[1] + ob[1])
            if o[0] + o[1] <= top:
                out[o] = out.get(o, 0.0) + va * vb
    return out


def q_hat_orders(slab: Slab, order_parts: dict, top: int = 2) -> dict:
    """Coefficients of ``Q-hat[V]`` up to total order ``top`` (lower orders included)."""
    r1, r2, _ = slab.rho
    a, g = slab.coeffs["a"], slab.coeffs["g"]
    lin: dict = {}
    Aser: dict = {}
    Vxx: dict = {}
    for o, V in order_parts.items():
        for (dp, dq), val in _pieces_pi0(slab, V)[1:4]:
            key = (o[0] + dp, o[1] + dq)
            lin[key] = lin.get(key, 0.0) + val
        lin[o] = lin.get(o, 0.0) + V["t"]
        for key, val in ((o, slab.lam * V["x"]), ((o[0] - 1, o[1]), r1 * a * V["xy"]),
                         ((o[0], o[1] + 1), r2 * g * V["xz"])):
            Aser[key] = Aser.get(key, 0.0) + val
        Vxx[o] = V["xx"]
    lo = min(min(k[0] for k in Aser), 0)
    if lo < 0 and np.any(np.abs(Aser.get((-1, 0), 0.0)) > 0):
        raise VerificationError("A carries an eps^(-1/2) component")
    Aser.pop((-1, 0), None)
    v0 = Vxx[(0, 0)]
    u = {o: -v / v0 for o, v in Vxx.items() if o != (0, 0)}
    inv = {(0, 0): 1.0 / v0}
    powr = {(0, 0): 1.0}
    for _ in range(top):
        powr = _smul(powr, u, top)
        for o, v in powr.items():
            inv[o] = inv.get(o, 0.0) + v / v0
    quad = _smul(_smul(Aser, Aser, top), inv, top)
    out = dict(lin)
    for o, v in quad.items():
        out[o] = out.get(o, 0.0) - 0.5 * v
    return out


# ------------------------------------------------------------ diagnostics ---

def terminal_margins(bundle: ExpansionBundle, constants, eps: float, delta: float, xs, ys,
                     zs, variants=VARIANTS) -> dict:
    """``min (U - V-(T))`` and ``min (V+(T) - U)`` over the grid."""
    T = bundle.spec.T
    xs = np.asarray(xs, float)
    u = bundle.utility.U(xs)[:, None]
    out = {v: np.inf for v in variants}
    for z in zs:
        slab = build_slab(bundle, np.full_like(xs, T), xs, ys, z, variants, z_derivs=False)
        for v in variants:
            val = total_partials(slab.orders(v, constants), eps, delta)[""]
            gap = (u - val) if v == "sub" else (val - u)
            out[v] = min(out[v], float(np.min(gap)))
    return out


@dataclass
class VerificationGrid:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray


def default_grid(spec, n_x: int = 9, n_y: int = 9, n_z: int = 9, h: float | None = None,
                 n_std: float = 4.0) -> VerificationGrid:
    T = spec.T
    h = 1e-3 * T if h is None else h
    t = np.array([0.0, T / 4, T / 2, 3 * T / 4, T - h])
    x = np.logspace(-1, 1, n_x)
    y = spec.y_mean + n_std * spec.y_std * np.linspace(-1, 1, n_y)
    if spec.delta > 0 or spec.params.get("lam_z", 0.0) != 0.0:
        z = spec.z_mean + n_std * spec.z_std * np.linspace(-1, 1, n_z)
    else:
        z = np.array([spec.z_mean])
    return VerificationGrid(t, x, y, z)


class GridVerifier:
    """Caches slabs so any ``(eps, delta, C)`` is checked by recombination."""

    def __init__(self, bundle: ExpansionBundle, grid: VerificationGrid):
        self.bundle = bundle
        self.grid = grid
        tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
        self.slabs = [build_slab(bundle, tt, xx, grid.y, z) for z in grid.z]
        self._terminal = None

    def terminal(self, constants, eps, delta) -> dict:
        return terminal_margins(self.bundle, constants, eps, delta, self.grid.x, self.grid.y,
                                self.grid.z)

    def check(self, constants, eps: float, delta: float) -> dict:
        q_sub = np.inf
        q_sup = -np.inf
        vxx = -np.inf
        sandwich = np.inf
        spread = 0.0
        for slab in self.slabs:
            sub = slab.orders("sub", constants)
            sup = slab.orders("super", constants)
            q_sub = min(q_sub, float(np.min(q_pi0_apply(slab, sub, eps, delta))))
            Vp = total_partials(sup, eps, delta)
            vxx = max(vxx, float(np.max(Vp["xx"])))
            if vxx < 0:
                q_sup = max(q_sup, float(np.max(q_hat_apply(slab, sup, eps, delta)[0])))
            else:
                q_sup = np.inf
            Vm = total_partials(sub, eps, delta)[""]
            sandwich = min(sandwich, float(np.min(Vp[""] - Vm)))
            spread = max(spread, float(np.max(Vp[""] - Vm)) / (eps + delta))
        term = self.terminal(constants, eps, delta)
        return {"min_q_sub": q_sub, "max_q_super": q_sup, "max_vxx_super": vxx,
                "terminal_sub": term["sub"], "terminal_super": term["super"],
                "min_sandwich": sandwich, "max_spread": spread}


TOL_Q = 1e-8
TOL_TERMINAL = 1e-10


def passes(report: dict) -> dict:
    return {
        "q_sub": report["min_q_sub"] >= -TOL_Q,
        "terminal_sub": report["terminal_sub"] >= -TOL_TERMINAL,
        "q_super": report["max_q_super"] <= TOL_Q,
        "concavity": report["max_vxx_super"] < 0,
        "terminal_super": report["terminal_super"] >= -TOL_TERMINAL,
    }


@dataclass
class Calibration:
    constants: tuple
    report: dict
    binding: str
    steps: int


def margins(report: dict) -> dict:
    """Slack of each check (positive means satisfied)."""
    return {
        "q_sub": report["min_q_sub"] + TOL_Q,
        "terminal_sub": report["terminal_sub"] + TOL_TERMINAL,
        "q_super": TOL_Q - report["max_q_super"],
        "concavity": -report["max_vxx_super"],
        "terminal_super": report["terminal_super"] + TOL_TERMINAL,
    }


def calibrate_constants(verifier: GridVerifier, eps: float, delta: float,
                        cap: float = 2.0**20) -> Calibration:
    """Smallest power-of-two common constant passing every grid check.

    ``binding`` names the check with the least slack at the returned constant.
    """
    C = 1.0
    steps = 0
    failing = ""
    while C <= cap:
        rep = verifier.check((C, C, C), eps, delta)
        ok = passes(rep)
        steps += 1
        if all(ok.values()):
            slack = margins(rep)
            return Calibration((C, C, C), rep, min(slack, key=slack.get), steps)
        failing = ",".join(k for k, v in ok.items() if not v)
        C *= 2.0
    raise VerificationError(
        f"eps/delta too large for verification: constant cap {cap:g} exceeded ({failing})")


def average_i_eps_sub(bundle: ExpansionBundle, t, x, z: float, C_A: float) -> np.ndarray:
    """Closed-form average of the eps-coefficient of ``Q^{pi0}[V-]``."""
    tb = bundle.thetas(z)
    f = bundle.merton(z)
    r1 = bundle.spec.rho1
    return (-0.5 * (tb.averages["theta_lam2"] - tb.averages["theta"] * tb.lam_bar**2)
            * f.evaluate(HD1, t, x)
            + 0.5 * r1**2 * tb.B**2 * f.evaluate(A.tau * D1HD2, t, x)
            + 0.5 * r1**2 * tb.B1 * f.evaluate(D1CUBE, t, x)
            + C_A * f.evaluate(D1M, t, x))

