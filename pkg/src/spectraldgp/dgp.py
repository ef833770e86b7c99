"""Deep GP model: layer composition, sampling, prediction, checkpoints.

A model is a stack of sparse variational GP layers. Hidden layers carry an
identity (truncated/padded linear) mean so the stack starts near the identity
map, plus a small trainable white-noise variance on their own Gram diagonal;
the final layer has zero mean and none. Inference is doubly stochastic:
minibatches plus per-layer reparameterized samples f = mean + eps * sqrt(var),
with exact Gaussian conditionals inside each layer and marginal variances
only.

Inducing variables come in two flavors per layer. "spectral" layers use the
RKHS Fourier features of `fourier` (cross-covariance is a feature matrix,
Gram is closed form); "local" layers use pseudo-inputs Z with plain kernel
Grams. Everything downstream of (Kuu, Kuf, kdiag) is shared.

Inter-layer activations are renormalized to [0, 1] before entering the next
layer, with per-dimension running min/max tracked by an exponential moving
average (decay 0.99) on a stop-gradient of the batch statistics. Evaluation
freezes the statistics and counts clamped points. This keeps every input to
the feature basis inside its interval by construction.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import fourier
from .kernels import AdditiveMatern
from .numerics import Rng, standard_normal
from .sparse_gp import gaussian_loglik_terms, kl_gaussian, kmeans_init, layer_predict

METHODS = ("id-dgp", "dgp-dsvi", "gp-vff", "gp-svi")

SCHEMA_VERSION = 1

EMA_DECAY = 0.99

INNER_SCALE_INIT = 1e-5     # variational variance init for hidden layers
INTER_NOISE_INIT = 1e-4
LIK_NOISE_INIT = 1e-2
LENGTHSCALE_INIT = 0.2      # on [0, 1]-normalized inputs


@dataclass(frozen=True)
class LayerSpec:
    d_in: int
    d_out: int
    feature: str            # "spectral" | "local"
    m: int                  # frequency count or pseudo-input count
    family: str
    mean: str               # "identity" | "zero"
    inter_noise: bool

    def n_inducing(self) -> int:
        if self.feature == "spectral":
            return fourier.n_features(self.m, self.d_in)
        return self.m


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    interval: tuple[float, float] = fourier.DEFAULT_INTERVAL

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in


def make_spec(method: str, d_in: int, n_layers: int = 2, m: int = 20,
              family: str = "matern32",
              interval=fourier.DEFAULT_INTERVAL) -> ModelSpec:
    """Model topology for one of the four method ids.

    Shallow methods (gp-vff, gp-svi) always build a single layer regardless
    of n_layers. Hidden widths equal the input dimension; the head is 1-D.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    feature = "spectral" if method in ("id-dgp", "gp-vff") else "local"
    if method in ("gp-vff", "gp-svi"):
        n_layers = 1
    if n_layers < 1:
        raise ValueError("need at least one layer")
    if method in ("id-dgp", "dgp-dsvi") and n_layers < 2:
        raise ValueError(f"{method} is a deep model, needs n_layers >= 2")
    layers = []
    for i in range(n_layers - 1):
        layers.append(LayerSpec(d_in=d_in, d_out=d_in, feature=feature, m=m,
                                family=family, mean="identity", inter_noise=True))
    layers.append(LayerSpec(d_in=d_in, d_out=1, feature=feature, m=m,
                            family=family, mean="zero", inter_noise=False))
    return ModelSpec(layers=tuple(layers), interval=tuple(interval))


@dataclass
class ParamSet:
    values: dict[str, np.ndarray]
    fixed: frozenset[str] = field(default_factory=frozenset)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.values if n not in self.fixed]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.values.items()}, self.fixed)


@dataclass
class NormalizerState:
    lo: np.ndarray
    hi: np.ndarray
    initialized: bool = False
    frozen: bool = False
    clamp_count: int = 0

    def copy(self) -> "NormalizerState":
        return NormalizerState(self.lo.copy(), self.hi.copy(),
                               self.initialized, self.frozen, self.clamp_count)


def update_stats(state: NormalizerState, values: np.ndarray) -> None:
    """EMA update of running min/max from a batch of activation values.

    Called on plain values only (stop-gradient); a state that has never seen
    data adopts the first batch outright.
    """
    if state.frozen:
        return
    lo, hi = values.min(axis=0), values.max(axis=0)
    if not state.initialized:
        state.lo, state.hi = lo, hi
        state.initialized = True
    else:
        state.lo = EMA_DECAY * state.lo + (1.0 - EMA_DECAY) * lo
        state.hi = EMA_DECAY * state.hi + (1.0 - EMA_DECAY) * hi


def apply_normalizer(f, state: NormalizerState, train: bool, probe=None):
    """Map activations through (f - lo) / (hi - lo), clamped to [0, 1].

    Statistics are constants here (gradient flows through f only). Dimensions
    with degenerate range map to 0.5. Out-of-range points at eval are counted
    before clamping. When probe is a list, the pre-clamp values are appended
    to it; the gradient checker uses this to confirm no activation sits on a
    clamp kink.
    """
    rng_ = state.hi - state.lo
    live = rng_ > 1e-12
    denom = np.where(live, rng_, 1.0)
    out = (f - state.lo) / denom
    out = out * live.astype(np.float64) + 0.5 * (~live).astype(np.float64)
    if probe is not None:
        probe.append(ad.value_of(out))
    if not train:
        vals = ad.value_of(out)
        state.clamp_count += int(np.sum((vals < 0.0) | (vals > 1.0)))
    return ad.clip(out, 0.0, 1.0)


def _identity_weights(d_in: int, d_out: int) -> np.ndarray:
    w = np.zeros((d_in, d_out))
    for j in range(min(d_in, d_out)):
        w[j, j] = 1.0
    return w


def init_params(spec: ModelSpec, X: np.ndarray, rng: Rng
                ) -> tuple[ParamSet, list[NormalizerState]]:
    """Parameters and normalizer states for a fresh model.

    X is the training input block; it fixes the layer-0 normalizer and seeds
    pseudo-inputs by k-means on the normalized inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d_in:
        raise ValueError(f"expected X of shape (N, {spec.d_in}), got {X.shape}")
    norms: list[NormalizerState] = []
    lo, hi = X.min(axis=0), X.max(axis=0)
    norms.append(NormalizerState(lo=lo, hi=hi, initialized=True, frozen=True))
    for layer in spec.layers[1:]:
        d = layer.d_in
        norms.append(NormalizerState(lo=np.zeros(d), hi=np.ones(d)))
    x0 = ad.value_of(apply_normalizer(X, norms[0], train=True))

    values: dict[str, np.ndarray] = {}
    fixed: set[str] = set()
    values["lik.log_noise"] = np.array(np.log(LIK_NOISE_INIT))
    for i, layer in enumerate(spec.layers):
        values[f"layer{i}.log_var"] = np.zeros(layer.d_in)
        values[f"layer{i}.log_len"] = np.full(layer.d_in, np.log(LENGTHSCALE_INIT))
        if layer.inter_noise:
            values[f"layer{i}.log_inter_noise"] = np.array(np.log(INTER_NOISE_INIT))
        if layer.feature == "local":
            values[f"layer{i}.z"] = kmeans_init(x0, layer.m, rng)
        if layer.mean == "identity":
            values[f"layer{i}.w"] = _identity_weights(layer.d_in, layer.d_out)
            fixed.add(f"layer{i}.w")
        nf = layer.n_inducing()
        is_final = i == len(spec.layers) - 1
        scale0 = np.eye(nf) if is_final else np.sqrt(INNER_SCALE_INIT) * np.eye(nf)
        for d in range(layer.d_out):
            values[f"layer{i}.q{d}.mu"] = np.zeros(nf)
            values[f"layer{i}.q{d}.scale"] = scale_param_from_factor(scale0)
    return ParamSet(values, frozenset(fixed)), norms


def scale_param_from_factor(C: np.ndarray) -> np.ndarray:
    """Unconstrained storage of a lower-triangular covariance factor.

    Off-diagonal entries are stored raw; the (positive) diagonal is stored in
    log space, so every slot moves multiplicatively under gradient steps.
    That matters because the inducing priors here span several orders of
    magnitude across coordinates and posterior scales must follow them.
    """
    C = np.asarray(C, dtype=np.float64)
    d = np.diag(C)
    if np.any(d <= 0):
        raise ValueError("covariance factor needs a positive diagonal")
    P = np.tril(C, k=-1)
    np.fill_diagonal(P, np.log(d))
    return P


def materialize_scale(P):
    """Lower-triangular factor from its unconstrained storage (autodiff-safe)."""
    nf = ad.value_of(P).shape[0]
    off_mask = np.tril(np.ones((nf, nf))) - np.eye(nf)
    return ad.tril(P) * off_mask + ad.diag_matrix(ad.exp(ad.diag_part(P)))


def _layer_terms(layer: LayerSpec, i: int, params, interval):
    """Per-pass quantities independent of the inputs: Kuu factor, q params."""
    lv = ad.exp(params[f"layer{i}.log_var"])
    ll = ad.exp(params[f"layer{i}.log_len"])
    noise = ad.exp(params[f"layer{i}.log_inter_noise"]) if layer.inter_noise else None
    if layer.feature == "spectral":
        Kuu = fourier.additive_kuu(layer.family, layer.m, interval, lv, ll)
    else:
        kern = AdditiveMatern(layer.family, layer.d_in)
        z = params[f"layer{i}.z"]
        Kuu = kern.gram(z, z, lv, ll, delta_var=noise)
    Lk = ad.cholesky(Kuu)
    mus = [params[f"layer{i}.q{d}.mu"] for d in range(layer.d_out)]
    scales = [materialize_scale(params[f"layer{i}.q{d}.scale"])
              for d in range(layer.d_out)]
    return Lk, mus, scales, lv, ll, noise


def _layer_apply(layer: LayerSpec, i: int, params, interval, terms, xn):
    """Predictive marginals of one layer at normalized inputs xn (N, d_in)."""
    Lk, mus, scales, lv, ll, noise = terms
    n = ad.value_of(xn).shape[0]
    kern = AdditiveMatern(layer.family, layer.d_in)
    if layer.feature == "spectral":
        Kuf = ad.transpose(fourier.additive_phi(xn, layer.m, interval))
    else:
        Kuf = kern.gram(params[f"layer{i}.z"], xn, lv, ll)
    kdiag = kern.kdiag(n, lv, delta_var=noise)
    if layer.mean == "identity":
        mean = ad.matmul(xn, params[f"layer{i}.w"])
    else:
        mean = np.zeros((n, layer.d_out))
    return layer_predict(Lk, Kuf, kdiag, mean, mus, scales)


def draw_eps(spec: ModelSpec, n: int, s: int, rng: Rng) -> list[np.ndarray]:
    """Reparameterization draws for the hidden layers: (S, N, d_out) each."""
    return [standard_normal(rng, (s, n, layer.d_out))
            for layer in spec.layers[:-1]]


def sample_forward(spec: ModelSpec, params, norms: list[NormalizerState],
                   X: np.ndarray, eps: list[np.ndarray], train: bool,
                   probe=None):
    """Propagate a batch through the stack.

    params: dict of slot name -> Var (training) or array (prediction).
    eps: per hidden layer, (S, N, d_out) standard normal draws; empty for a
    single-layer model. Returns (finals, kl): finals is a list over samples
    of (mean, var) pairs at the head, kl the summed KL of all layers. probe,
    when a list, collects pre-clamp hidden activations (layer 0 is skipped:
    its inputs are parameter-independent, so clamping there cannot bias a
    finite-difference check).
    """
    n_layers = spec.n_layers
    if len(eps) != max(n_layers - 1, 0):
        raise ValueError(f"expected {n_layers - 1} eps blocks, got {len(eps)}")
    s = eps[0].shape[0] if eps else 1
    kl_total = None
    samples = None
    finals = []
    for i, layer in enumerate(spec.layers):
        terms = _layer_terms(layer, i, params, spec.interval)
        Lk, mus, scales = terms[0], terms[1], terms[2]
        for mu, scale in zip(mus, scales):
            term = kl_gaussian(mu, scale, Lk)
            kl_total = term if kl_total is None else kl_total + term
        last = i == n_layers - 1
        if i == 0:
            xn = apply_normalizer(X, norms[0], train)
            m0, v0 = _layer_apply(layer, i, params, spec.interval, terms, xn)
            if last:
                finals = [(m0, v0)]
            else:
                sd = ad.sqrt(v0)
                samples = [m0 + eps[0][k] * sd for k in range(s)]
        else:
            if train:
                stacked = np.concatenate([ad.value_of(f) for f in samples], axis=0)
                update_stats(norms[i], stacked)
            outs = []
            for f in samples:
                xn = apply_normalizer(f, norms[i], train, probe=probe)
                outs.append(_layer_apply(layer, i, params, spec.interval, terms, xn))
            if last:
                finals = outs
            else:
                samples = [m + eps[i][k] * ad.sqrt(v)
                           for k, (m, v) in enumerate(outs)]
    return finals, kl_total


def predict_moments(spec: ModelSpec, params: ParamSet,
                    norms: list[NormalizerState], X: np.ndarray,
                    s_eval: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Mixture mean and variance of the head f (no likelihood noise).

    Law of total variance over the S sample paths; exact for a single layer.
    """
    eps = draw_eps(spec, X.shape[0], s_eval, rng) if spec.n_layers > 1 else []
    finals, _ = sample_forward(spec, params.values, norms, X, eps, train=False)
    means = np.stack([ad.value_of(m) for m, _ in finals])
    varis = np.stack([ad.value_of(v) for _, v in finals])
    mean = means.mean(axis=0)
    var = varis.mean(axis=0) + (means ** 2).mean(axis=0) - mean ** 2
    return mean, np.maximum(var, 0.0)


def predict_density(spec: ModelSpec, params: ParamSet,
                    norms: list[NormalizerState], X: np.ndarray, y: np.ndarray,
                    s_eval: int, rng: Rng) -> np.ndarray:
    """Per-point predictive log density log (1/S) sum_s N(y | m_s, v_s + s2)."""
    from .numerics import logsumexp
    eps = draw_eps(spec, X.shape[0], s_eval, rng) if spec.n_layers > 1 else []
    finals, _ = sample_forward(spec, params.values, norms, X, eps, train=False)
    noise = float(np.exp(params.values["lik.log_noise"]))
    y = np.asarray(y, dtype=np.float64).reshape(X.shape[0], -1)
    rows = []
    for m, v in finals:
        mv, vv = ad.value_of(m), ad.value_of(v) + noise
        ll = -0.5 * np.log(2.0 * np.pi * vv) - (y - mv) ** 2 / (2.0 * vv)
        rows.append(ll.sum(axis=1))
    stacked = np.stack(rows)                      # (S, N)
    return logsumexp(stacked, axis=0) - np.log(stacked.shape[0])


# --- checkpointing ---------------------------------------------------------

def checkpoint_state(spec: ModelSpec, params: ParamSet,
                     norms: list[NormalizerState], extra: dict | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "interval": list(spec.interval),
            "layers": [{
                "d_in": l.d_in, "d_out": l.d_out, "feature": l.feature,
                "m": l.m, "family": l.family, "mean": l.mean,
                "inter_noise": l.inter_noise,
            } for l in spec.layers],
        },
        "params": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist(),
                   "fixed": name in params.fixed}
            for name, v in params.values.items()
        },
        "normalizers": [{
            "lo": s.lo.tolist(), "hi": s.hi.tolist(),
            "initialized": s.initialized, "frozen": s.frozen,
            "clamp_count": s.clamp_count,
        } for s in norms],
        "extra": extra or {},
    }


def restore_state(d: dict):
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema_version {version!r}")
    spec = ModelSpec(
        layers=tuple(LayerSpec(**l) for l in d["model"]["layers"]),
        interval=tuple(d["model"]["interval"]),
    )
    values, fixed = {}, set()
    for name, p in d["params"].items():
        values[name] = np.array(p["data"], dtype=np.float64).reshape(p["shape"])
        if p["fixed"]:
            fixed.add(name)
    norms = [NormalizerState(
        lo=np.array(s["lo"], dtype=np.float64),
        hi=np.array(s["hi"], dtype=np.float64),
        initialized=s["initialized"], frozen=s["frozen"],
        clamp_count=s["clamp_count"],
    ) for s in d["normalizers"]]
    return spec, ParamSet(values, frozenset(fixed)), norms, d.get("extra", {})


def save_checkpoint(path: str, spec: ModelSpec, params: ParamSet,
                    norms: list[NormalizerState], extra: dict | None = None) -> None:
    """Atomic JSON write: temp file in the target directory, then rename.

    Floats go through repr-based JSON serialization, which round-trips
    float64 bit-exactly.
    """
    state = checkpoint_state(spec, params, norms, extra)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(state, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    with open(path) as fh:
        return restore_state(json.load(fh))
