"""Variational training: ELBO assembly, Adam ascent, the minibatch loop.

The objective is the doubly stochastic evidence lower bound

    scale * (1/S) sum_s sum_n E_q[log N(y_n | f_n^(s), s2)] - sum KL(q(u)||p(u))

with scale = N / |batch|. Expectations over the head are analytic (Gaussian
likelihood); only the propagation through hidden layers is sampled. For a
single-layer model there is no sampling at all and the objective coincides
with the closed-form sparse GP bound.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dgp
from .numerics import make_rng
from .sparse_gp import gaussian_loglik_terms


def elbo(spec: dgp.ModelSpec, handed, norms, X: np.ndarray, y: np.ndarray,
         eps: list[np.ndarray], scale_factor: float = 1.0, train: bool = True,
         probe=None):
    """The training objective on one batch; Var when parameters are tracked."""
    finals, kl = dgp.sample_forward(spec, handed, norms, X, eps, train,
                                    probe=probe)
    noise = ad.exp(handed["lik.log_noise"])
    lik = None
    for m, v in finals:
        t = ad.sum_(gaussian_loglik_terms(y, m, v, noise))
        lik = t if lik is None else lik + t
    return scale_factor * (lik / float(len(finals))) - kl


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, values: dict[str, np.ndarray],
                   names: list[str]) -> "AdamState":
        return cls(m={n: np.zeros_like(values[n]) for n in names},
                   v={n: np.zeros_like(values[n]) for n in names})


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam, ascent direction (maximizing the ELBO)."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        values[name] = values[name] + lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 1e-2
    batch: int = 256
    s_train: int = 5
    seed: int = 0
    checkpoint_every: int = 200
    trace_path: str | None = None
    checkpoint_path: str | None = None


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    aborted: bool = False
    n_iters: int = 0
    final_elbo: float = float("nan")
    restored_iter: int | None = None


def _finite(val: float, grads: dict[str, np.ndarray]) -> bool:
    if not np.isfinite(val):
        return False
    return all(np.all(np.isfinite(g)) for g in grads.values())


def train(spec: dgp.ModelSpec, params: dgp.ParamSet,
          norms: list[dgp.NormalizerState], X: np.ndarray, y: np.ndarray,
          cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam ascent on the ELBO, in place on `params` and `norms`.

    Two child rng streams (batch selection, reparameterization draws) keep
    reruns with the same seed bit-identical. A non-finite objective or
    gradient aborts the run and restores the last good snapshot.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
    n = X.shape[0]
    root = make_rng(cfg.seed)
    batch_rng, eps_rng = root.spawn(2)
    trainable = params.trainable
    adam = AdamState.for_params(params.values, trainable)
    result = TrainResult()
    full_batch = n <= cfg.batch
    snap_every = max(1, cfg.checkpoint_every)
    good = (params.copy(), [s.copy() for s in norms], 0)

    trace_fh = open(cfg.trace_path, "w") if cfg.trace_path else None
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            if full_batch:
                Xb, yb, scale = X, y, 1.0
            else:
                idx = batch_rng.choice(n, size=cfg.batch, replace=False)
                Xb, yb, scale = X[idx], y[idx], n / cfg.batch
            s = 1 if spec.n_layers == 1 else cfg.s_train
            eps = dgp.draw_eps(spec, Xb.shape[0], s, eps_rng) \
                if spec.n_layers > 1 else []

            def objective(handed):
                return elbo(spec, handed, norms, Xb, yb, eps, scale, train=True)

            val, grads = ad.gradient(objective, params.values, trainable=trainable)
            if not _finite(val, grads):
                params.values.update(good[0].copy().values)
                for st, snap in zip(norms, good[1]):
                    st.lo, st.hi = snap.lo.copy(), snap.hi.copy()
                    st.initialized, st.frozen = snap.initialized, snap.frozen
                    st.clamp_count = snap.clamp_count
                result.aborted = True
                result.restored_iter = good[2]
                break
            adam_step(params.values, grads, adam, cfg.lr)
            entry = {"iter": it, "elbo": float(val),
                     "seconds": time.perf_counter() - t0, "lr": cfg.lr}
            result.trace.append(entry)
            result.final_elbo = float(val)
            result.n_iters = it + 1
            if trace_fh is not None:
                trace_fh.write(json.dumps(entry) + "\n")
            if (it + 1) % snap_every == 0:
                good = (params.copy(), [s_.copy() for s_ in norms], it + 1)
                if cfg.checkpoint_path:
                    dgp.save_checkpoint(cfg.checkpoint_path, spec, params, norms,
                                        extra={"iter": it + 1, "seed": cfg.seed})
    finally:
        if trace_fh is not None:
            trace_fh.close()
    if cfg.checkpoint_path:
        dgp.save_checkpoint(cfg.checkpoint_path, spec, params, norms,
                            extra={"iter": result.n_iters, "seed": cfg.seed,
                                   "aborted": result.aborted})
    return result


def model_gradcheck(spec: dgp.ModelSpec, params: dgp.ParamSet,
                    norms: list[dgp.NormalizerState], X: np.ndarray,
                    y: np.ndarray, s: int = 2, seed: int = 0,
                    h: float = 1e-5, rel_tol: float = 1e-4):
    """Central-difference validation of the full training objective.

    Draws are frozen up front, normalizer statistics stay untouched
    (train=False path), so the objective is a fixed deterministic function of
    the parameters.

    The check runs at a randomized parameter point near the one handed in, for
    two reasons. At a freshly initialized model many coordinates (inner
    variational scales in particular) have gradients around 1e-7, beneath the
    resolution of central differences with step h, so agreement there measures
    noise rather than correctness. And a generic point exercises every term of
    the objective at once. Points whose hidden activations fall within a small
    margin of the [0, 1] clamp are redrawn: the clamp kink makes finite
    differences invalid there, not the analytic gradient.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
    rng = make_rng(seed)
    s_eff = 1 if spec.n_layers == 1 else s
    eps = dgp.draw_eps(spec, X.shape[0], s_eff, rng) if spec.n_layers > 1 else []
    norms = [st.copy() for st in norms]

    margin = 100.0 * h
    point = None
    for _ in range(32):
        trial = {n: v.copy() for n, v in params.values.items()}
        for name in sorted(trial):
            if name in params.fixed:
                continue
            trial[name] = trial[name] + 0.3 * rng.standard_normal(
                np.shape(trial[name]))
        probe: list[np.ndarray] = []
        elbo(spec, trial, norms, X, y, eps, 1.0, train=False, probe=probe)
        clear = all(
            np.all((np.abs(p) > margin) & (np.abs(p - 1.0) > margin))
            for p in probe)
        if clear:
            point = trial
            break
    if point is None:
        raise RuntimeError(
            "could not find a check point clear of the clamp kink")

    def objective(handed):
        return elbo(spec, handed, norms, X, y, eps, 1.0, train=False)

    return ad.gradcheck(objective, point, trainable=params.trainable,
                        h=h, rel_tol=rel_tol)
