import numpy as np
import pytest
from scipy import stats

from spectraldgp import data, numerics


def test_multistep_noise_free_plateaus():
    d = data.gen_multistep(200, noise=0.0, rng=numerics.make_rng(0))
    x = d.X[:, 0]
    assert np.all(d.y[x < 0.2] == 0.0)
    assert np.all(d.y[(x > 0.2) & (x < 0.4)] == 1.0)
    assert np.all(d.y[(x > 0.6) & (x < 0.8)] == -1.0)


def test_multistep_same_seed_identical():
    a = data.gen_multistep(100, rng=numerics.make_rng(9))
    b = data.gen_multistep(100, rng=numerics.make_rng(9))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_multistep_rejects_bad_boundaries():
    rng = numerics.make_rng(0)
    with pytest.raises(ValueError, match="increasing"):
        data.gen_multistep(10, levels=(0, 1, 0), boundaries=(0.5, 0.3), rng=rng)
    with pytest.raises(ValueError, match="one more level"):
        data.gen_multistep(10, levels=(0, 1), boundaries=(0.3, 0.6), rng=rng)
    with pytest.raises(ValueError, match="inside"):
        data.gen_multistep(10, levels=(0, 1), boundaries=(1.2,), rng=rng)


def test_multistep_occupancy_matches_spacing():
    d = data.gen_multistep(10_000, noise=0.0, rng=numerics.make_rng(3))
    edges = [0.0, *data.MULTISTEP_BOUNDARIES, 1.0]
    counts = np.histogram(d.X[:, 0], bins=edges)[0]
    expected = np.diff(edges) * d.n
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_modulated_zero_envelope_is_pure_noise():
    d = data.gen_modulated(5000, envelope=0.0, noise=0.3,
                           rng=numerics.make_rng(1))
    assert abs(np.mean(d.y)) < 0.02
    assert abs(np.std(d.y) - 0.3) < 0.02


def test_modulated_zero_noise_deterministic():
    a = data.gen_modulated(50, noise=0.0, rng=numerics.make_rng(4))
    b = data.gen_modulated(50, noise=0.0, rng=numerics.make_rng(4))
    assert np.array_equal(a.y, b.y)
    x = a.X[:, 0]
    amp = 0.15 + 0.85 * 0.5 * (1.0 - np.cos(2.0 * np.pi * x))
    assert np.allclose(a.y, amp * np.sin(2.0 * np.pi * 3.5 * x))


def test_modulated_lag1_autocorrelation_high():
    d = data.gen_modulated(3500, rng=numerics.make_rng(0))
    order = np.argsort(d.X[:, 0])
    y = d.y[order] - d.y.mean()
    r1 = np.sum(y[1:] * y[:-1]) / np.sum(y * y)
    assert r1 > 0.9


def test_modulated_rejects_empty():
    with pytest.raises(ValueError):
        data.gen_modulated(0, rng=numerics.make_rng(0))


def test_load_csv_roundtrip(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y\n0.5,1.25\n0.75,-2.0\n")
    d = data.load_csv(str(p))
    assert d.n == 2 and d.d == 1
    assert d.feature_names == ("x",)
    assert np.array_equal(d.X, [[0.5], [0.75]])
    assert np.array_equal(d.y, [1.25, -2.0])


def test_load_csv_errors_name_row_and_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,3\n4,NaN,6\n")
    with pytest.raises(ValueError, match=r"row 2, column 'b'"):
        data.load_csv(str(p))
    p.write_text("a,y\n1,2\n4,oops\n")
    with pytest.raises(ValueError, match=r"row 2, column 'y'.*not numeric"):
        data.load_csv(str(p))
    p.write_text("a,y\n1,2\n4,\n")
    with pytest.raises(ValueError, match="missing"):
        data.load_csv(str(p))


def test_load_csv_empty_and_malformed(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="empty"):
        data.load_csv(str(p))
    p.write_text("x,y\n1,2,3\n")
    with pytest.raises(ValueError, match="row 1 has 3 fields"):
        data.load_csv(str(p))
    p.write_text("y\n1\n")
    with pytest.raises(ValueError, match="at least one feature"):
        data.load_csv(str(p))


def test_load_csv_keeps_constant_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,7,0\n2,7,1\n3,7,2\n")
    d = data.load_csv(str(p))
    assert d.d == 2
    assert np.all(d.X[:, 1] == 7.0)


def test_split_disjoint_and_reproducible():
    d = data.gen_multistep(200, rng=numerics.make_rng(0))
    s1 = data.split_dataset(d, 0.4, numerics.make_rng(5))
    s2 = data.split_dataset(d, 0.4, numerics.make_rng(5))
    assert s1.x_test.shape[0] == 80 and s1.x_train.shape[0] == 120
    assert np.array_equal(s1.x_test, s2.x_test)
    assert np.array_equal(s1.y_train, s2.y_train)
    combined = np.sort(np.concatenate([s1.x_train[:, 0], s1.x_test[:, 0]]))
    assert np.array_equal(combined, np.sort(d.X[:, 0]))


def test_split_statistics_come_from_train_half():
    d = data.gen_multistep(100, rng=numerics.make_rng(2))
    s = data.split_dataset(d, 0.3, numerics.make_rng(0))
    assert s.y_mean == pytest.approx(np.mean(s.y_train))
    assert s.y_std == pytest.approx(np.std(s.y_train))
    assert np.array_equal(s.x_lo, s.x_train.min(axis=0))
    assert np.array_equal(s.x_hi, s.x_train.max(axis=0))
    z = s.standardized_train_targets()
    assert np.mean(z) == pytest.approx(0.0, abs=1e-12)
    assert np.std(z) == pytest.approx(1.0)


def test_split_rejects_constant_targets():
    d = data.Dataset(np.linspace(0, 1, 10)[:, None], np.ones(10), ("x",))
    with pytest.raises(ValueError, match="constant"):
        data.split_dataset(d, 0.3, numerics.make_rng(0))


def test_srmse_definition():
    t = np.array([1.0, 2.0, 3.0])
    assert data.standardized_rmse(t, t, 2.0) == 0.0
    one = data.standardized_rmse(t + 1.0, t, 2.0)
    two = data.standardized_rmse(t + 2.0, t, 2.0)
    assert two == pytest.approx(2.0 * one)
    assert one == pytest.approx(0.5)
    with pytest.raises(ValueError):
        data.standardized_rmse(t, t[:2], 2.0)
    with pytest.raises(ValueError):
        data.standardized_rmse(t, t, 0.0)


def test_srmse_of_train_mean_near_one():
    d = data.gen_multistep(4000, rng=numerics.make_rng(7))
    s = data.split_dataset(d, 0.4, numerics.make_rng(7))
    pred = np.full(s.y_test.shape, s.y_mean)
    assert data.standardized_rmse(pred, s.y_test, s.y_std) == pytest.approx(
        1.0, abs=0.1)


def test_mean_log_likelihood_jacobian_correction():
    rng = numerics.make_rng(0)
    y = rng.normal(3.0, 2.0, size=50)
    mu, sd = float(np.mean(y)), float(np.std(y))
    m, v = 0.1, 0.8
    z = (y - mu) / sd
    ld_std = -0.5 * np.log(2 * np.pi * v) - (z - m) ** 2 / (2 * v)
    reported = data.mean_log_likelihood(ld_std, sd)
    direct = np.mean(
        -0.5 * np.log(2 * np.pi * v * sd ** 2)
        - (y - (m * sd + mu)) ** 2 / (2 * v * sd ** 2))
    assert reported == pytest.approx(float(direct), abs=1e-12)
