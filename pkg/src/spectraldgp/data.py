"""Datasets for the experiment harness.

Two synthetic generators cover the regimes the models are compared on: a
piecewise-constant multi-step function (global structure plus abrupt
non-stationarity) and an amplitude-modulated sinusoid (strong autocorrelation,
slowly drifting local scale). A CSV loader handles real tables with the target
in the last column. Splitting and target standardization keep all fitted
statistics on the train side, and the two reported metrics are standardized
RMSE and mean predictive log likelihood in the original target units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, standard_normal

MULTISTEP_LEVELS = (0.0, 1.0, 0.0, -1.0, 0.0)
MULTISTEP_BOUNDARIES = (0.2, 0.4, 0.6, 0.8)


@dataclass
class Dataset:
    """A regression table: X is (N, D), y is (N,)."""
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.ndim != 2:
            raise ValueError("X must be two dimensional")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")
        if len(self.feature_names) != self.X.shape[1]:
            raise ValueError("one feature name per column required")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class Split:
    """Train/test partition with the statistics fitted on the train half.

    x_lo / x_hi are per-dimension train minima and maxima; y_mean / y_std are
    the train-target moments used for standardization and for reporting
    metrics in original units.
    """
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_mean: float
    y_std: float

    def standardized_train_targets(self) -> np.ndarray:
        return (self.y_train - self.y_mean) / self.y_std

    def standardized_test_targets(self) -> np.ndarray:
        return (self.y_test - self.y_mean) / self.y_std


def gen_multistep(n: int, levels=MULTISTEP_LEVELS,
                  boundaries=MULTISTEP_BOUNDARIES, noise: float = 0.05,
                  rng: Rng | None = None) -> Dataset:
    """Noisy piecewise-constant function of a uniform input on [0, 1].

    levels has one entry per plateau; boundaries are the strictly increasing
    interior breakpoints, so len(levels) == len(boundaries) + 1.
    """
    if rng is None:
        raise ValueError("an rng is required")
    levels = np.asarray(levels, dtype=np.float64)
    boundaries = np.asarray(boundaries, dtype=np.float64)
    if levels.shape[0] != boundaries.shape[0] + 1:
        raise ValueError("need exactly one more level than boundaries")
    if boundaries.size and not np.all(np.diff(boundaries) > 0.0):
        raise ValueError("boundaries must be strictly increasing")
    if boundaries.size and (boundaries[0] <= 0.0 or boundaries[-1] >= 1.0):
        raise ValueError("boundaries must lie strictly inside (0, 1)")
    x = rng.uniform(0.0, 1.0, size=n)
    idx = np.searchsorted(boundaries, x, side="right")
    y = levels[idx]
    if noise > 0.0:
        y = y + noise * standard_normal(rng, (n,))
    return Dataset(x[:, None], y, ("x",))


def gen_modulated(n: int, carrier: float = 3.5, envelope: float = 1.0,
                  noise: float = 0.05, rng: Rng | None = None) -> Dataset:
    """Amplitude-modulated sinusoid on [0, 1].

    y = envelope * a(x) * sin(2 pi carrier x) + noise, where a(x) is a slow
    raised-cosine hump with a small floor so the signal never vanishes
    entirely. carrier counts cycles across the unit interval. envelope = 0
    leaves pure noise; noise = 0 leaves the deterministic signal.
    """
    if n < 1:
        raise ValueError("need at least one point")
    if rng is None:
        raise ValueError("an rng is required")
    x = rng.uniform(0.0, 1.0, size=n)
    amp = 0.15 + 0.85 * 0.5 * (1.0 - np.cos(2.0 * np.pi * x))
    y = envelope * amp * np.sin(2.0 * np.pi * carrier * x)
    if noise > 0.0:
        y = y + noise * standard_normal(rng, (n,))
    return Dataset(x[:, None], y, ("x",))


def load_csv(path: str) -> Dataset:
    """Parse a numeric CSV with one header row; the last column is the target.

    Missing or non-numeric cells raise with the offending row and column
    named (rows counted from 1, header excluded).
    """
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if len(header) < 2:
        raise ValueError(f"{path}: need at least one feature and a target")
    width = len(header)
    rows = []
    for i, line in enumerate(lines[1:], start=1):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != width:
            raise ValueError(
                f"{path}: row {i} has {len(cells)} fields, expected {width}")
        vals = []
        for j, cell in enumerate(cells):
            if cell == "":
                raise ValueError(
                    f"{path}: row {i}, column {header[j]!r} is missing")
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: row {i}, column {header[j]!r} is not numeric"
                    f" ({cell!r})") from None
            if not np.isfinite(v):
                raise ValueError(
                    f"{path}: row {i}, column {header[j]!r} is not finite"
                    f" ({cell!r})")
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :-1], arr[:, -1], tuple(header[:-1]))


def split_dataset(data: Dataset, test_fraction: float, rng: Rng) -> Split:
    """Disjoint random train/test partition, statistics fitted on train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = data.n
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    perm = rng.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    x_tr, y_tr = data.X[train_idx], data.y[train_idx]
    x_te, y_te = data.X[test_idx], data.y[test_idx]
    y_std = float(np.std(y_tr))
    if y_std <= 0.0:
        raise ValueError("train targets are constant, cannot standardize")
    return Split(x_train=x_tr, y_train=y_tr, x_test=x_te, y_test=y_te,
                 x_lo=x_tr.min(axis=0), x_hi=x_tr.max(axis=0),
                 y_mean=float(np.mean(y_tr)), y_std=y_std)


def standardized_rmse(predictions: np.ndarray, targets: np.ndarray,
                      train_std: float) -> float:
    """RMSE divided by the train-target standard deviation.

    predictions and targets must share units (both original or both
    standardized with the same statistics).
    """
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.shape != targets.shape:
        raise ValueError("predictions and targets differ in length")
    if not train_std > 0.0:
        raise ValueError("train_std must be positive")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)) / train_std)


def mean_log_likelihood(log_densities: np.ndarray, train_std: float) -> float:
    """Mean predictive log density in original target units.

    log_densities are per-point log densities of the standardized targets
    under the model; dividing by the train std in the standardization has
    Jacobian 1/std, so the density in original units subtracts log(std).
    """
    log_densities = np.asarray(log_densities, dtype=np.float64).reshape(-1)
    if not train_std > 0.0:
        raise ValueError("train_std must be positive")
    return float(np.mean(log_densities) - np.log(train_std))
