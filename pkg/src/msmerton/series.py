"""Truncated Taylor-series arithmetic, vectorised over evaluation points.

A series is an array of shape ``(n, *batch)`` holding coefficients
``a_0 .. a_{n-1}`` of ``sum a_j v**j``.
"""

from __future__ import annotations

import numpy as np


def mul(a, b):
    n = a.shape[0]
    out = np.zeros_like(a)
    for kk in range(n):
        acc = 0.0
        for j in range(kk + 1):
            acc = acc + a[j] * b[kk - j]
        out[kk] = acc
    return out


def div(a, b):
    n = a.shape[0]
    out = np.zeros_like(a)
    for kk in range(n):
        acc = a[kk]
        for j in range(1, kk + 1):
            acc = acc - b[j] * out[kk - j]
        out[kk] = acc / b[0]
    return out


def power(a, p: float):
    """``a**p`` for ``a_0 > 0`` (J.C.P. Miller recurrence)."""
    n = a.shape[0]
    out = np.zeros_like(a)
    out[0] = a[0] ** p
    for kk in range(1, n):
        acc = 0.0
        for j in range(1, kk + 1):
            acc = acc + ((p + 1) * j - kk) * a[j] * out[kk - j]
        out[kk] = acc / (kk * a[0])
    return out


def log(a):
    n = a.shape[0]
    out = np.zeros_like(a)
    out[0] = np.log(a[0])
    for kk in range(1, n):
        acc = kk * a[kk]
        for j in range(1, kk):
            acc = acc - j * out[j] * a[kk - j]
        out[kk] = acc / (kk * a[0])
    return out


def deriv(a):
    """Series of the derivative (one order shorter, zero-padded)."""
    out = np.zeros_like(a)
    for kk in range(a.shape[0] - 1):
        out[kk] = (kk + 1) * a[kk + 1]
    return out


def variable(x0, n: int):
    """Series of ``x0 + v``."""
    x0 = np.asarray(x0, dtype=float)
    out = np.zeros((n,) + x0.shape)
    out[0] = x0
    if n > 1:
        out[1] = 1.0
    return out


def derivatives(a):
    """Convert coefficients to derivatives ``f^{(j)}(x0) = j! a_j``."""
    fac = np.ones(a.shape[0])
    for j in range(1, a.shape[0]):
        fac[j] = fac[j - 1] * j
    return a * fac.reshape((-1,) + (1,) * (a.ndim - 1))
