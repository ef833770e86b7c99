"""Matern kernels of half-integer order and their additive multi-dimension form.

All kernel code is written against the autodiff ops, so parameters may be
tracked Vars (training) or plain arrays (prediction, oracles). Multi-d
structure is additive: k(x, x') = sum_d k_d(|x_d - x'_d|), each component
with its own variance and lengthscale, which is also what gives the Fourier
feature construction its per-dimension block structure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FAMILIES = ("matern12", "matern32", "matern52")

# lam = _LAM_NUM[family] / lengthscale is the exponential decay rate
_LAM_NUM = {"matern12": 1.0, "matern32": np.sqrt(3.0), "matern52": np.sqrt(5.0)}


def decay_rate(family: str, lengthscale):
    if family not in FAMILIES:
        raise ValueError(f"unknown kernel family {family!r}")
    return _LAM_NUM[family] / lengthscale


def matern_value(family: str, r, variance, lengthscale):
    """Kernel value at distance r >= 0 (elementwise)."""
    t = decay_rate(family, lengthscale) * r
    e = ad.exp(-t)
    if family == "matern12":
        poly = 1.0
    elif family == "matern32":
        poly = 1.0 + t
    else:
        poly = 1.0 + t + ad.square(t) / 3.0
    return variance * poly * e


def spectral_density(family: str, omega, variance, lengthscale):
    """Power spectral density S(w); integrates to variance over dw/(2 pi)."""
    lam = decay_rate(family, lengthscale)
    q = lam ** 2 + np.asarray(omega, dtype=np.float64) ** 2
    if family == "matern12":
        return variance * 2.0 * lam / q
    if family == "matern32":
        return variance * 4.0 * lam ** 3 / q ** 2
    return variance * (16.0 / 3.0) * lam ** 5 / q ** 3


def gram1d(family: str, x, y, variance, lengthscale):
    """Gram matrix k(|x_i - y_j|) for 1-D point sets x (N,), y (M,)."""
    n = ad.value_of(x).shape[0]
    m = ad.value_of(y).shape[0]
    r = ad.absolute(ad.reshape(x, (n, 1)) - ad.reshape(y, (1, m)))
    return matern_value(family, r, variance, lengthscale)


@dataclass(frozen=True)
class AdditiveMatern:
    """Sum of independent 1-D Matern components, one per input dimension."""

    family: str
    dims: int

    def gram(self, X, Y, variances, lengthscales, delta_var=None):
        """(N, M) Gram; delta_var (if given) is added on the diagonal and is
        only legal when X and Y are the same collection (index coincidence,
        not value coincidence)."""
        n = ad.value_of(X).shape[0]
        m = ad.value_of(Y).shape[0]
        total = None
        for d in range(self.dims):
            kd = gram1d(self.family, X[:, d], Y[:, d],
                        variances[d], lengthscales[d])
            total = kd if total is None else total + kd
        if delta_var is not None:
            if n != m:
                raise ValueError("delta noise needs a square same-collection Gram")
            total = total + np.eye(n) * delta_var
        return total

    def kdiag(self, n: int, variances, delta_var=None):
        """Diagonal of the Gram of one collection with itself: stationary, so
        sum of component variances, plus the index-coincidence noise."""
        total = variances[0]
        for d in range(1, self.dims):
            total = total + variances[d]
        if delta_var is not None:
            total = total + delta_var
        return total * np.ones(n)
