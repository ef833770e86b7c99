import json

import numpy as np
import pytest

from spectraldgp import autodiff as ad
from spectraldgp import dgp, fourier, kernels, numerics, sparse_gp


def toy_data(n=8, seed=0, d=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, d))
    y = np.sin(4 * X[:, :1].sum(axis=1, keepdims=True)) + 0.1 * rng.normal(size=(n, 1))
    return X, y


def test_make_spec_shapes():
    spec = dgp.make_spec("id-dgp", d_in=2, n_layers=3, m=4)
    assert spec.n_layers == 3
    assert [l.d_out for l in spec.layers] == [2, 2, 1]
    assert all(l.feature == "spectral" for l in spec.layers)
    assert [l.mean for l in spec.layers] == ["identity", "identity", "zero"]
    assert [l.inter_noise for l in spec.layers] == [True, True, False]
    assert spec.layers[0].n_inducing() == 2 * 4 * 2 + 1
    local = dgp.make_spec("dgp-dsvi", d_in=2, n_layers=2, m=10)
    assert local.layers[0].feature == "local"
    assert local.layers[0].n_inducing() == 10


def test_make_spec_shallow_coerces_single_layer():
    spec = dgp.make_spec("gp-vff", d_in=1, n_layers=3, m=8)
    assert spec.n_layers == 1
    assert spec.layers[0].mean == "zero"
    spec = dgp.make_spec("gp-svi", d_in=1, n_layers=2, m=8)
    assert spec.n_layers == 1
    assert spec.layers[0].feature == "local"


def test_make_spec_validation():
    with pytest.raises(ValueError):
        dgp.make_spec("nope", d_in=1)
    with pytest.raises(ValueError):
        dgp.make_spec("id-dgp", d_in=1, n_layers=1)


def test_init_params_slots():
    X, _ = toy_data(n=20, d=2)
    spec = dgp.make_spec("id-dgp", d_in=2, n_layers=2, m=3)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    nf = fourier.n_features(3, 2)
    assert params.values["layer0.q0.mu"].shape == (nf,)
    assert params.values["layer0.q1.scale"].shape == (nf, nf)
    assert params.values["layer1.q0.scale"].shape == (nf, nf)
    assert "layer0.w" in params.fixed
    assert "layer0.log_inter_noise" in params.values
    assert "layer1.log_inter_noise" not in params.values
    # inner layers start almost deterministic, the head at the prior scale
    assert np.allclose(
        ad.value_of(dgp.materialize_scale(params.values["layer0.q0.scale"])),
        np.sqrt(1e-5) * np.eye(nf))
    assert np.allclose(
        ad.value_of(dgp.materialize_scale(params.values["layer1.q0.scale"])),
        np.eye(nf))
    assert len(norms) == 2
    assert norms[0].frozen and not norms[1].frozen


def test_init_params_local_kmeans_inside_range():
    X, _ = toy_data(n=30, d=2)
    spec = dgp.make_spec("dgp-dsvi", d_in=2, n_layers=2, m=5)
    params, _ = dgp.init_params(spec, X, numerics.make_rng(0))
    z = params.values["layer0.z"]
    assert z.shape == (5, 2)
    assert z.min() >= 0.0 and z.max() <= 1.0


def test_normalizer_ema_and_freeze():
    s = dgp.NormalizerState(lo=np.array([0.0]), hi=np.array([1.0]),
                            initialized=True)
    dgp.update_stats(s, np.array([[0.5], [2.0]]))
    assert np.isclose(s.hi[0], 0.99 * 1.0 + 0.01 * 2.0)
    assert np.isclose(s.lo[0], 0.99 * 0.0 + 0.01 * 0.5)
    s.frozen = True
    hi = s.hi.copy()
    dgp.update_stats(s, np.array([[100.0]]))
    assert np.array_equal(s.hi, hi)


def test_normalizer_first_batch_adopts_stats():
    s = dgp.NormalizerState(lo=np.zeros(1), hi=np.ones(1))
    dgp.update_stats(s, np.array([[-3.0], [5.0]]))
    assert s.initialized and s.lo[0] == -3.0 and s.hi[0] == 5.0


def test_normalizer_apply_maps_to_unit_interval():
    s = dgp.NormalizerState(lo=np.array([-1.0]), hi=np.array([3.0]),
                            initialized=True)
    out = ad.value_of(dgp.apply_normalizer(np.array([[-1.0], [1.0], [3.0]]),
                                           s, train=True))
    assert np.allclose(out[:, 0], [0.0, 0.5, 1.0])


def test_normalizer_degenerate_dimension_maps_to_half():
    s = dgp.NormalizerState(lo=np.array([2.0]), hi=np.array([2.0]),
                            initialized=True)
    out = ad.value_of(dgp.apply_normalizer(np.array([[2.0], [2.0]]), s,
                                           train=True))
    assert np.allclose(out, 0.5)


def test_normalizer_eval_clamps_and_counts():
    s = dgp.NormalizerState(lo=np.array([0.0]), hi=np.array([1.0]),
                            initialized=True, frozen=True)
    out = ad.value_of(dgp.apply_normalizer(np.array([[-0.5], [0.5], [1.7]]),
                                           s, train=False))
    assert np.allclose(out[:, 0], [0.0, 0.5, 1.0])
    assert s.clamp_count == 2


def test_sample_forward_shapes_and_determinism():
    X, _ = toy_data(n=6)
    spec = dgp.make_spec("id-dgp", d_in=1, n_layers=2, m=3)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    eps = dgp.draw_eps(spec, 6, 4, numerics.make_rng(1))
    finals, kl = dgp.sample_forward(spec, params.values, norms, X, eps,
                                    train=False)
    assert len(finals) == 4
    for m, v in finals:
        assert ad.value_of(m).shape == (6, 1)
        assert np.all(ad.value_of(v) > 0)
    assert float(ad.value_of(kl)) >= 0.0
    finals2, _ = dgp.sample_forward(spec, params.values, norms, X, eps,
                                    train=False)
    for (m1, v1), (m2, v2) in zip(finals, finals2):
        assert np.array_equal(ad.value_of(m1), ad.value_of(m2))
        assert np.array_equal(ad.value_of(v1), ad.value_of(v2))


def test_sample_forward_eps_count_validation():
    X, _ = toy_data(n=4)
    spec = dgp.make_spec("id-dgp", d_in=1, n_layers=2, m=2)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    with pytest.raises(ValueError):
        dgp.sample_forward(spec, params.values, norms, X, [], train=False)


def test_single_layer_prediction_is_closed_form():
    X, y = toy_data(n=10)
    spec = dgp.make_spec("gp-vff", d_in=1, m=6)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    rng = np.random.default_rng(3)
    nf = spec.layers[0].n_inducing()
    params.values["layer0.q0.mu"] = rng.normal(size=nf)
    mean, var = dgp.predict_moments(spec, params, norms, X, s_eval=50,
                                    rng=numerics.make_rng(5))
    # direct layer computation
    lv = np.exp(params.values["layer0.log_var"])
    ll = np.exp(params.values["layer0.log_len"])
    xn = ad.value_of(dgp.apply_normalizer(X, norms[0], train=False))
    Kuu = ad.value_of(fourier.additive_kuu("matern32", 6, spec.interval, lv, ll))
    L, _ = numerics.cholesky(Kuu)
    Kuf = ad.value_of(fourier.additive_phi(xn, 6, spec.interval)).T
    kern = kernels.AdditiveMatern("matern32", 1)
    pm, pv = sparse_gp.layer_predict(
        L, Kuf, kern.kdiag(10, lv), np.zeros((10, 1)),
        [params.values["layer0.q0.mu"]],
        [ad.value_of(dgp.materialize_scale(params.values["layer0.q0.scale"]))])
    assert np.allclose(mean, ad.value_of(pm), atol=1e-12)
    assert np.allclose(var, ad.value_of(pv), atol=1e-12)


def test_monte_carlo_moments_match_mixture():
    """Empirical stats of sampled head values vs the mixture's analytic ones."""
    X, y = toy_data(n=3)
    spec = dgp.make_spec("id-dgp", d_in=1, n_layers=2, m=3)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    rng = np.random.default_rng(7)
    nf = spec.layers[0].n_inducing()
    for i in (0, 1):
        params.values[f"layer{i}.q0.mu"] = 0.5 * rng.normal(size=nf)
    s = 10_000
    eps = dgp.draw_eps(spec, 3, s, numerics.make_rng(11))
    finals, _ = dgp.sample_forward(spec, params.values, norms, X, eps,
                                   train=False)
    means = np.stack([ad.value_of(m)[:, 0] for m, _ in finals])   # (S, N)
    varis = np.stack([ad.value_of(v)[:, 0] for _, v in finals])
    draw = means + np.random.default_rng(13).standard_normal((s, 3)) * np.sqrt(varis)
    mix_mean = means.mean(axis=0)
    mix_var = varis.mean(axis=0) + means.var(axis=0)
    se_mean = np.sqrt(mix_var / s)
    assert np.all(np.abs(draw.mean(axis=0) - mix_mean) < 4 * se_mean)
    se_var = mix_var * np.sqrt(8.0 / s)  # generous: kurtosis of the mixture
    assert np.all(np.abs(draw.var(axis=0) - mix_var) < 4 * se_var)


def test_predict_density_s_consistency():
    X, y = toy_data(n=5)
    spec = dgp.make_spec("id-dgp", d_in=1, n_layers=2, m=3)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    big = dgp.predict_density(spec, params, norms, X, y, s_eval=10_000,
                              rng=numerics.make_rng(1))
    small = np.stack([
        dgp.predict_density(spec, params, norms, X, y, s_eval=100,
                            rng=numerics.make_rng(100 + r))
        for r in range(20)
    ])
    # the S=100 estimator's own MC standard error, estimated across runs
    se = small.std(axis=0, ddof=1)
    assert np.all(np.abs(big - small.mean(axis=0)) < 3 * np.maximum(se, 1e-6))


def test_predict_density_variance_shrinks_like_one_over_s():
    X, y = toy_data(n=4)
    spec = dgp.make_spec("id-dgp", d_in=1, n_layers=2, m=3)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    reps = 30
    ss = [10, 100, 1000]
    variances = []
    k = 0
    for s in ss:
        vals = []
        for r in range(reps):
            k += 1
            vals.append(dgp.predict_density(spec, params, norms, X, y,
                                            s_eval=s,
                                            rng=numerics.make_rng(1000 + k)).mean())
        variances.append(np.var(vals, ddof=1))
    slope = np.polyfit(np.log(ss), np.log(variances), 1)[0]
    assert -1.3 < slope < -0.7


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    X, _ = toy_data(n=12, d=2)
    spec = dgp.make_spec("dgp-dsvi", d_in=2, n_layers=2, m=4)
    params, norms = dgp.init_params(spec, X, numerics.make_rng(0))
    rng = np.random.default_rng(1)
    for name in params.trainable:
        params.values[name] = params.values[name] + 0.1 * rng.normal(
            size=params.values[name].shape)
    norms[1].clamp_count = 3
    path = str(tmp_path / "ck.json")
    dgp.save_checkpoint(path, spec, params, norms, extra={"iter": 7})
    spec2, params2, norms2, extra = dgp.load_checkpoint(path)
    assert spec2 == spec
    assert extra["iter"] == 7
    assert set(params2.values) == set(params.values)
    for name, v in params.values.items():
        assert np.array_equal(params2.values[name], v), name
    assert params2.fixed == params.fixed
    for s1, s2 in zip(norms, norms2):
        assert np.array_equal(s1.lo, s2.lo) and np.array_equal(s1.hi, s2.hi)
        assert (s1.initialized, s1.frozen, s1.clamp_count) == \
               (s2.initialized, s2.frozen, s2.clamp_count)
    # a second save of the loaded state is byte-identical
    path2 = str(tmp_path / "ck2.json")
    dgp.save_checkpoint(path2, spec2, params2, norms2, extra={"iter": 7})
    assert open(path).read() == open(path2).read()


def test_checkpoint_rejects_unknown_schema():
    with pytest.raises(ValueError):
        dgp.restore_state({"schema_version": 999})
