"""Exact D-operator algebra for Merton value functions in heat coordinates.

Every quantity built from ``M(t, x; lam)`` is written in the heat variable
``xi`` and the accumulated variance ``s = lam**2 * (T - t)``.  With
``x = K(xi, s)`` (the heat-smoothed inverse marginal utility):

    M_x = e := exp(-xi - s/2),    R = K_1,    D_1 = d/dxi,    K_s = K_2 / 2.

Expressions are polynomials over Q in the generators

    e, m (= M), ik (= 1/K_1), tau (= T - t), lam, T, ie (= 1/e), k0, k1, ...

and derivatives are derivations on that ring.  Only ``k_n`` values (the
n-th xi-derivative of K) and ``m`` need to be supplied numerically.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from sympy import QQ
from sympy.polys.rings import ring

NK = 24
_NAMES = ["e", "m", "ik", "tau", "lam", "T", "ie"] + [f"k{n}" for n in range(NK)]
RING, *_GENS = ring(",".join(_NAMES), QQ)
e, m, ik, tau, lam, T, ie = _GENS[:7]
k = _GENS[7:]
_K0 = 7
_IDX = {name: i for i, name in enumerate(_NAMES)}


def _derive(f, images):
    """Apply the derivation that maps generator ``g`` to ``images[g]``."""
    out = RING.zero
    for name, img in images.items():
        if img == 0:
            continue
        g = RING.gens[_IDX[name]]
        part = f.diff(g)
        if part:
            out += part * img
    return out


def _xi_images():
    imgs = {"e": -e, "m": e * k[1], "ik": -ik**2 * k[2], "ie": ie}
    for n in range(NK - 1):
        imgs[f"k{n}"] = k[n + 1]
    return imgs


def _s_images():
    imgs = {"e": -e / 2, "m": e * (k[1] + k[2]) / 2, "ik": -ik**2 * k[3] / 2, "ie": ie / 2}
    for n in range(NK - 2):
        imgs[f"k{n}"] = k[n + 2] / 2
    return imgs


_XI = _xi_images()
_S = _s_images()


def d_xi(f):
    return _derive(f, _XI)


def d_s(f):
    return _derive(f, _S)


def dx(f):
    return ik * d_xi(f)


def _shift(f):
    # derivative along s with x held fixed
    return d_s(f) - k[2] * ik * d_xi(f) / 2


def dt(f):
    return -lam**2 * _shift(f) - f.diff(tau)


def dlam(f):
    return 2 * lam * tau * _shift(f) + f.diff(lam)


def D1(f):
    # R d/dx == d/dxi
    return d_xi(f)


def D(kk: int, f):
    out = f
    for _ in range(kk):
        out = dx(out)
    return k[1] ** kk * out


def D2(f):
    return D(2, f)


def hD(f):
    """``(D_2 / 2 + D_1) f``."""
    return D2(f) / 2 + D1(f)


def L_tx(f, lam_sq):
    """``(d_t + lam^2/2 D_2 + lam^2 D_1) f``; ``lam_sq`` is a ring element or number."""
    return dt(f) + lam_sq * hD(f)


M = m
Mx = dx(M)
Mxx = dx(Mx)
R = k[1]


def kmax(f) -> int:
    """Highest ``k_n`` index used by ``f`` (-1 when none)."""
    top = -1
    for mon in f.monoms():
        for n in range(NK):
            if mon[_K0 + n]:
                top = max(top, n)
    return top


class Compiled:
    """Vectorised numeric evaluator of a ring element."""

    def __init__(self, f):
        self.poly = f
        terms = f.terms()
        self.nk = kmax(f) + 1
        if not terms:
            self.exps = np.zeros((0, len(_NAMES)), dtype=int)
            self.coefs = np.zeros(0)
        else:
            self.exps = np.array([mon for mon, _ in terms], dtype=int)
            self.coefs = np.array([float(c) for _, c in terms])
        used = np.nonzero(self.exps.sum(axis=0))[0] if len(self.coefs) else []
        self.used = [int(u) for u in used]
        self.maxpow = {u: int(self.exps[:, u].max()) for u in self.used}

    def __call__(self, env: dict) -> np.ndarray:
        shape = np.shape(env["e"])
        if not len(self.coefs):
            return np.zeros(shape)
        powers = {}
        for u in self.used:
            base = np.asarray(env[_NAMES[u]], dtype=float)
            tab = [np.ones(shape), np.broadcast_to(base, shape)]
            for _ in range(2, self.maxpow[u] + 1):
                tab.append(tab[-1] * base)
            powers[u] = tab
        out = np.zeros(shape)
        for row, c in zip(self.exps, self.coefs):
            term = np.full(shape, c)
            for u in self.used:
                p = row[u]
                if p:
                    term = term * powers[u][p]
            out += term
        return out


@lru_cache(maxsize=None)
def _compile_cached(key):
    return Compiled(RING.from_dict(dict(key)))


def compile_poly(f) -> Compiled:
    return _compile_cached(tuple(sorted(f.to_dict().items())))


JET_KEYS = ("", "t", "x", "xx", "l", "ll", "xl")


def _jet_polys(f):
    f_l = dlam(f)
    f_x = dx(f)
    return {"": f, "t": dt(f), "x": f_x, "xx": dx(f_x), "l": f_l, "ll": dlam(f_l), "xl": dx(f_l)}


@lru_cache(maxsize=None)
def _jet_cached(key):
    f = RING.from_dict(dict(key))
    return {kk: compile_poly(v) for kk, v in _jet_polys(f).items()}


def jet(f) -> dict:
    """Compiled (P, P_t, P_x, P_xx, P_lam, P_lamlam, P_xlam) evaluators of ``f``."""
    return _jet_cached(tuple(sorted(f.to_dict().items())))
