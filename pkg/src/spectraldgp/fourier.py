"""RKHS Fourier features for Matern GPs on an interval.

The inducing variables are projections u_m = <f, phi_m>_H of the process onto
a truncated Fourier basis
    phi(x) = [1, cos(w_1 (x-a)), ..., cos(w_M (x-a)), sin(w_1 (x-a)), ...],
    w_m = 2 pi m / (b - a),
taken in the RKHS of the Matern kernel restricted to [a, b]. The reproducing
property gives cov(u_m, f(x)) = phi_m(x), so the cross-covariance needs no
integrals at all, and cov(u_m, u_m') = <phi_m, phi_m'>_H has a closed form.

For the half-integer Matern families the RKHS norm on an interval is a
differential-operator quadratic form plus boundary corrections:

  Matern-1/2, lam = 1/l:
    <g,h> = 1/(2 s2 lam) * int_a^b (g'+lam g)(h'+lam h) dt + g(a) h(a) / s2
  Matern-3/2, lam = sqrt(3)/l:
    <g,h> = 1/(4 s2 lam^3) * int_a^b (Lg)(Lh) dt
            + g(a) h(a) / s2 + g'(a) h'(a) / (lam^2 s2),
    L = d^2/dt^2 + 2 lam d/dt + lam^2

(s2 = kernel variance). Plugging the basis in and using trig orthogonality
over the whole number of periods gives a diagonal matrix at the spectral
scale (b-a) / (2 S(w_m)) plus low-rank boundary terms: rank one coupling all
cosine features (and the constant), plus, for Matern-3/2, a second rank-one
term coupling the sine features with weights w_m. Those structures are what
`kuu_closed` builds; `kuu_quadrature` evaluates the same inner products by
panel-doubled Gauss-Legendre quadrature and is the independent oracle the
closed forms are tested against.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import numerics
from .kernels import decay_rate

DEFAULT_INTERVAL = (-2.0, 3.0)

CLOSED_FORM_FAMILIES = ("matern12", "matern32")


def n_features(m: int, dims: int = 1) -> int:
    return 2 * m * dims + 1


def frequencies(m: int, interval) -> np.ndarray:
    a, b = interval
    return 2.0 * np.pi * np.arange(1, m + 1) / (b - a)


def _check_domain(x_values: np.ndarray, interval) -> None:
    a, b = interval
    if x_values.size and (x_values.min() < a or x_values.max() > b):
        raise ValueError(
            f"inputs outside the feature interval [{a}, {b}]: "
            f"range [{x_values.min():.6g}, {x_values.max():.6g}]")


def phi_eval(x, m: int, interval):
    """Feature matrix (N, 2M+1) of the basis evaluated at 1-D points x.

    The basis is periodic over [a, b], so phi(a) == phi(b). Raises when any
    point leaves the interval: upstream renormalization guarantees this never
    happens in a trained model.
    """
    xv = ad.value_of(x)
    if xv.ndim != 1:
        raise ValueError(f"phi_eval expects 1-D points, got shape {xv.shape}")
    _check_domain(xv, interval)
    n = xv.shape[0]
    ones = np.ones((n, 1))
    if m == 0:
        if ad.is_var(x):
            # keep the graph connected even in the constant-only case
            return ad.concat([ones + 0.0 * ad.reshape(x, (n, 1))], axis=1)
        return ones
    a, _ = interval
    w = frequencies(m, interval)
    arg = ad.reshape(x - a, (n, 1)) * w.reshape(1, m)
    return ad.concat([ones, ad.cos(arg), ad.sin(arg)], axis=1)


def _diag_scales(family: str, m: int, interval, variance, lengthscale):
    """Diagonal of the feature Gram before the boundary low-rank terms.

    Equals (b - a) / (2 S(w)) at each frequency, with the constant entry
    doubled relative to that limit.
    """
    a, b = interval
    delta = b - a
    lam = decay_rate(family, lengthscale)
    w = frequencies(m, interval)
    if family == "matern12":
        d0 = delta * lam / (2.0 * variance)
        dm = (delta / (4.0 * variance)) * ((ad.square(lam) + w ** 2) / lam)
    else:
        d0 = delta * lam / (4.0 * variance)
        dm = (delta / (8.0 * variance)) * (ad.square(ad.square(lam) + w ** 2)
                                           / (lam * ad.square(lam)))
    return d0, dm


def kuu_closed(family: str, m: int, interval, variance, lengthscale):
    """Closed-form feature Gram <phi_i, phi_j>_H, shape (2M+1, 2M+1)."""
    if family not in CLOSED_FORM_FAMILIES:
        raise ValueError(f"no closed-form feature Gram for {family!r}")
    d0, dm = _diag_scales(family, m, interval, variance, lengthscale)
    # constant + cosine coupling: ones on [const | cos block]
    v1 = np.concatenate([np.ones(1 + m), np.zeros(m)])
    rank1 = np.outer(v1, v1)
    if m == 0:
        diag = ad.reshape(d0, (1,)) if ad.is_var(d0) else np.array([ad.value_of(d0)])
    else:
        d0v = ad.reshape(d0, (1,))
        diag = ad.concat([d0v, dm, dm], axis=0)
    K = ad.diag_matrix(diag) + rank1 * (1.0 / variance)
    if family == "matern32":
        # sine block boundary coupling from the g'(a) h'(a) term
        w = frequencies(m, interval)
        v2 = np.concatenate([np.zeros(1 + m), w])
        lam = decay_rate(family, lengthscale)
        K = K + np.outer(v2, v2) * (1.0 / (variance * ad.square(lam)))
    return K


def _basis_values(m: int, interval, t: np.ndarray):
    """Basis functions and first/second derivatives at points t.

    Returns (phi, dphi, d2phi), each (len(t), 2M+1).
    """
    a, _ = interval
    w = frequencies(m, interval)
    n = t.shape[0]
    arg = np.outer(t - a, w)
    phi = np.concatenate([np.ones((n, 1)), np.cos(arg), np.sin(arg)], axis=1)
    dphi = np.concatenate([np.zeros((n, 1)), -np.sin(arg) * w, np.cos(arg) * w], axis=1)
    d2phi = np.concatenate([np.zeros((n, 1)), -np.cos(arg) * w ** 2,
                            -np.sin(arg) * w ** 2], axis=1)
    return phi, dphi, d2phi


def _rkhs_inner_matrix(family: str, m: int, interval, variance, lengthscale,
                       n_panels: int, glx: np.ndarray, glw: np.ndarray) -> np.ndarray:
    a, b = interval
    lam = float(decay_rate(family, ad.value_of(lengthscale)))
    s2 = float(ad.value_of(variance))
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * glx[None, :]).ravel()
    wq = (half[:, None] * glw[None, :]).ravel()
    phi, dphi, d2phi = _basis_values(m, interval, t)
    if family == "matern12":
        op = dphi + lam * phi
        K = (op * wq[:, None]).T @ op / (2.0 * s2 * lam)
    else:
        op = d2phi + 2.0 * lam * dphi + lam ** 2 * phi
        K = (op * wq[:, None]).T @ op / (4.0 * s2 * lam ** 3)
    phi_a, dphi_a, _ = _basis_values(m, interval, np.array([a]))
    K = K + np.outer(phi_a[0], phi_a[0]) / s2
    if family == "matern32":
        K = K + np.outer(dphi_a[0], dphi_a[0]) / (s2 * lam ** 2)
    return K


def kuu_quadrature(family: str, m: int, interval, variance, lengthscale,
                   tol: float = 1e-8, max_doublings: int = 12) -> np.ndarray:
    """Feature Gram via panel-doubled Gauss-Legendre quadrature (oracle).

    Doubles the panel count until the whole matrix moves by less than `tol`
    between refinements; raises if that never happens.
    """
    if family not in CLOSED_FORM_FAMILIES:
        raise ValueError(f"quadrature oracle implemented for {CLOSED_FORM_FAMILIES}")
    glx, glw = np.polynomial.legendre.leggauss(20)
    n_panels = 4
    prev = _rkhs_inner_matrix(family, m, interval, variance, lengthscale,
                              n_panels, glx, glw)
    for _ in range(max_doublings):
        n_panels *= 2
        cur = _rkhs_inner_matrix(family, m, interval, variance, lengthscale,
                                 n_panels, glx, glw)
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    raise RuntimeError(f"quadrature did not converge to {tol} "
                       f"within {n_panels} panels")


def rkhs_inner_quadrature(family: str, interval, variance, lengthscale,
                          g, dg, d2g, h, dh, d2h,
                          tol: float = 1e-8, max_doublings: int = 16) -> float:
    """<g, h>_H by the same panel-doubled quadrature, for arbitrary callables.

    Used by tests to anchor the oracle itself on the reproducing property.
    Integrands with kinks converge only if the kink lands on a panel edge, so
    test functions should place kinks at dyadic fractions of the interval.
    """
    a, b = interval
    lam = float(decay_rate(family, lengthscale))
    s2 = float(variance)
    glx, glw = np.polynomial.legendre.leggauss(20)

    def inner(n_panels: int) -> float:
        edges = np.linspace(a, b, n_panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        t = (mid[:, None] + half[:, None] * glx[None, :]).ravel()
        wq = (half[:, None] * glw[None, :]).ravel()
        if family == "matern12":
            val = np.sum(wq * (dg(t) + lam * g(t)) * (dh(t) + lam * h(t)))
            val /= 2.0 * s2 * lam
        else:
            og = d2g(t) + 2.0 * lam * dg(t) + lam ** 2 * g(t)
            oh = d2h(t) + 2.0 * lam * dh(t) + lam ** 2 * h(t)
            val = np.sum(wq * og * oh) / (4.0 * s2 * lam ** 3)
        val += g(np.array([a]))[0] * h(np.array([a]))[0] / s2
        if family == "matern32":
            val += dg(np.array([a]))[0] * dh(np.array([a]))[0] / (s2 * lam ** 2)
        return float(val)

    n_panels = 4
    prev = inner(n_panels)
    for _ in range(max_doublings):
        n_panels *= 2
        cur = inner(n_panels)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    raise RuntimeError("inner-product quadrature did not converge")


def k_projected(family: str, m: int, interval, variance, lengthscale,
                xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Projected kernel k_F(x, y) = phi(x)^T Kuu^-1 phi(y).

    This is the kernel of the conditional expectation of f given the features,
    so k - k_F is itself a positive semidefinite kernel, and k_F -> k as M
    grows (for inputs inside the interval).
    """
    K = ad.value_of(kuu_closed(family, m, interval, variance, lengthscale))
    L, _ = numerics.cholesky(K)
    A = numerics.tri_solve(L, ad.value_of(phi_eval(xs, m, interval)).T)
    B = numerics.tri_solve(L, ad.value_of(phi_eval(ys, m, interval)).T)
    return A.T @ B


def selection_matrices(m: int, dims: int) -> list[np.ndarray]:
    """S_d embedding each dimension's (2M+1) features into the joint layout.

    Joint layout: one shared constant at index 0, then per dimension a block
    of M cosines followed by M sines. The shared constant row of every S_d
    hits index 0, which is what makes the joint Gram sum_d S_d K_d S_d^T:
    the constant inducing variable is the sum of the per-dimension constant
    projections, so its cross-covariance with f(x) is `dims`.
    """
    nf = n_features(m, dims)
    mats = []
    for d in range(dims):
        S = np.zeros((nf, 2 * m + 1))
        S[0, 0] = 1.0
        block = 1 + d * 2 * m
        for j in range(m):
            S[block + j, 1 + j] = 1.0              # cosines
            S[block + m + j, 1 + m + j] = 1.0      # sines
        mats.append(S)
    return mats


def additive_phi(X, m: int, interval):
    """Joint feature matrix (N, 2MD+1) for additive multi-d inputs."""
    Xv = ad.value_of(X)
    if Xv.ndim != 2:
        raise ValueError(f"additive_phi expects (N, D) inputs, got {Xv.shape}")
    dims = Xv.shape[1]
    if dims == 1:
        return phi_eval(X[:, 0], m, interval)
    mats = selection_matrices(m, dims)
    total = None
    for d in range(dims):
        part = ad.matmul(phi_eval(X[:, d], m, interval), mats[d].T)
        total = part if total is None else total + part
    return total


def additive_kuu(family: str, m: int, interval, variances, lengthscales):
    """Joint feature Gram (2MD+1)^2 = sum_d S_d Kuu_d S_d^T."""
    dims = ad.value_of(variances).shape[0]
    if dims == 1:
        return kuu_closed(family, m, interval, variances[0], lengthscales[0])
    mats = selection_matrices(m, dims)
    total = None
    for d in range(dims):
        Kd = kuu_closed(family, m, interval, variances[d], lengthscales[d])
        part = ad.matmul(mats[d], ad.matmul(Kd, mats[d].T))
        total = part if total is None else total + part
    return total
