"""Shared numerical primitives.

Matrices everywhere in this package are float64 numpy arrays, C-ordered,
shape (n, m). Vectors are 1-D arrays. All routines here are deterministic:
given identical inputs they return bit-identical outputs, which is what the
reproducibility guarantees of the training stack lean on.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_triangular


class FactorizationError(RuntimeError):
    """Raised when a matrix stays non-factorizable through all jitter retries."""


# Jitter policy: first try the matrix as-is; on failure add jitter starting at
# JITTER_BASE * mean(diag) and escalate by x10, at most MAX_JITTER_TRIES times.
JITTER_BASE = 1e-8
MAX_JITTER_TRIES = 5


def cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric PSD matrix, with jitter escalation.

    Returns (L, jitter_used). jitter_used is 0.0 when the clean factorization
    succeeds. Raises FactorizationError when even the largest jitter fails.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got shape {a.shape}")
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    mean_diag = float(np.mean(np.diag(a)))
    # guard: a matrix with non-positive diagonal mean still gets a usable scale
    base = JITTER_BASE * (mean_diag if mean_diag > 0 else 1.0)
    eye = np.eye(a.shape[0])
    for k in range(MAX_JITTER_TRIES):
        jitter = base * (10.0 ** k)
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"cholesky failed after {MAX_JITTER_TRIES} jitter attempts "
        f"(base {base:.3e}, final {jitter:.3e})"
    )


def tri_solve(L: np.ndarray, b: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve L x = b (trans=False) or L^T x = b (trans=True), L lower triangular."""
    return _solve_triangular(L, b, lower=True, trans=1 if trans else 0,
                             check_finite=False)


def logsumexp(v: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Overflow-safe log(sum(exp(v))) along axis."""
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


# RNG: a single root generator per run, children spawned for independent
# streams (per-seed experiments, minibatch draws vs sampling draws). PCG64
# spawning guarantees streams are independent and reproducible.

Rng = np.random.Generator


def make_rng(seed) -> Rng:
    """Fresh generator from an int seed or a sequence of ints.

    Sequence seeds give cheap independent stream families: make_rng((s, 0))
    and make_rng((s, 1)) never share draws, and neither collides with
    make_rng(s) or its spawned children.
    """
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(rng: Rng, n: int) -> list[Rng]:
    return rng.spawn(n)


def standard_normal(rng: Rng, shape) -> np.ndarray:
    return rng.standard_normal(size=shape)
