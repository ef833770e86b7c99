"""Sparse variational GP building blocks shared by every layer type.

A layer holds inducing variables u with prior N(0, Kuu) and a free Gaussian
posterior q(u) = N(mu, Sigma), Sigma = C C^T with C lower triangular. The
predictive marginals at inputs with cross-covariance Kuf and prior diagonal
kdiag are

    mean = m(x) + Kfu Kuu^-1 mu
    var  = kdiag - diag(Kfu Kuu^-1 (Kuu - Sigma) Kuu^-1 Kuf)

computed through the Cholesky factor of Kuu only (no explicit inverses).
Whether u lives at pseudo-inputs (Kuf = k(Z, X)) or is a spectral projection
(Kuf = phi(X)^T) makes no difference to any formula here.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .numerics import Rng

# predictive variances are clamped here after the (Kuu - Sigma) correction;
# anything more negative than roundoff upstream is a bug the tests catch
VAR_FLOOR = 1e-12


def conditional_terms(Lkuu, Kuf):
    """A = L^-1 Kuf and W = Kuu^-1 Kuf, shared across output dimensions."""
    A = ad.tri_solve(Lkuu, Kuf, trans=False)
    W = ad.tri_solve(Lkuu, A, trans=True)
    return A, W


def layer_predict(Lkuu, Kuf, kdiag, mean, mus, scales, terms=None):
    """Predictive marginals for one layer, all output dimensions.

    Lkuu: (M', M') lower Cholesky of the inducing Gram.
    Kuf: (M', N) cross-covariance. kdiag: (N,) prior marginal variances.
    mean: (N, D_out) prior mean values. mus/scales: per-output-dimension
    variational parameters, mu (M',), scale (M', M') lower factor.
    Returns (mean (N, D_out), var (N, D_out)).
    """
    n = ad.value_of(Kuf).shape[1]
    A, W = conditional_terms(Lkuu, Kuf) if terms is None else terms
    qdiag = ad.sum_(ad.square(A), axis=0)
    cols_m, cols_v = [], []
    for mu, scale in zip(mus, scales):
        proj = ad.matmul(ad.transpose(W), mu)
        ct = ad.matmul(ad.transpose(ad.tril(scale)), W)
        svar = kdiag - qdiag + ad.sum_(ad.square(ct), axis=0)
        cols_m.append(ad.reshape(proj, (n, 1)))
        cols_v.append(ad.reshape(ad.clip_lower(svar, VAR_FLOOR), (n, 1)))
    return mean + ad.concat(cols_m, axis=1), ad.concat(cols_v, axis=1)


def layer_predict_full(Lkuu, Kuf, Kff, mean, mus, scales):
    """Full predictive covariance per output dimension (reference path).

    Returns (mean (N, D_out), covs list of (N, N)). Used by tests; the
    training stack only ever needs marginals.
    """
    n = ad.value_of(Kuf).shape[1]
    A, W = conditional_terms(Lkuu, Kuf)
    base = Kff - ad.matmul(ad.transpose(A), A)
    cols_m, covs = [], []
    for mu, scale in zip(mus, scales):
        proj = ad.matmul(ad.transpose(W), mu)
        ct = ad.matmul(ad.transpose(ad.tril(scale)), W)
        covs.append(base + ad.matmul(ad.transpose(ct), ct))
        cols_m.append(ad.reshape(proj, (n, 1)))
    return mean + ad.concat(cols_m, axis=1), covs


def kl_gaussian(mu, scale, Lkuu):
    """KL(N(mu, C C^T) || N(0, Kuu)) for one output dimension."""
    nf = ad.value_of(mu).shape[0]
    C = ad.tril(scale)
    lic = ad.tri_solve(Lkuu, C)
    limu = ad.tri_solve(Lkuu, mu)
    logdet_kuu = 2.0 * ad.sum_(ad.log(ad.diag_part(Lkuu)))
    logdet_sigma = 2.0 * ad.sum_(ad.log(ad.absolute(ad.diag_part(C))))
    return 0.5 * (ad.sum_(ad.square(lic)) + ad.sum_(ad.square(limu))
                  - float(nf) + logdet_kuu - logdet_sigma)


def gaussian_loglik_terms(y, mean, var, noise_var):
    """Per-point expected Gaussian log likelihood under q(f).

    E_q[log N(y | f, s2)] = log N(y | mean, s2) - var / (2 s2), elementwise
    over (N, D) arrays.
    """
    resid = y - mean
    return (-0.5 * np.log(2.0 * np.pi) - 0.5 * ad.log(noise_var)
            - (ad.square(resid) + var) / (2.0 * noise_var))


def svgp_elbo(Lkuu, Kuf, kdiag, mean, y, mus, scales, noise_var,
              scale_factor: float = 1.0):
    """Single-layer evidence lower bound, exact (no sampling).

    y: (N, D_out) targets. scale_factor: N / |batch| minibatch correction.
    """
    m, v = layer_predict(Lkuu, Kuf, kdiag, mean, mus, scales)
    lik = ad.sum_(gaussian_loglik_terms(y, m, v, noise_var))
    kl = None
    for mu, scale in zip(mus, scales):
        term = kl_gaussian(mu, scale, Lkuu)
        kl = term if kl is None else kl + term
    return scale_factor * lik - kl


def kmeans_init(X: np.ndarray, k: int, rng: Rng,
                max_iters: int = 100, rel_tol: float = 1e-6) -> np.ndarray:
    """k-means++ seeded Lloyd iteration; deterministic given the rng stream.

    Stops after `max_iters` rounds or when the relative inertia change drops
    below `rel_tol`. Empty clusters keep their previous center.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n points, got k={k}, n={n}")
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = X[rng.integers(n)]
            continue
        centers[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    prev_inertia = np.inf
    for _ in range(max_iters):
        dist = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        inertia = float(dist[np.arange(n), assign].sum())
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = X[mask].mean(axis=0)
        if np.isfinite(prev_inertia) and \
                prev_inertia - inertia <= rel_tol * max(prev_inertia, 1e-300):
            break
        prev_inertia = inertia
    return centers
