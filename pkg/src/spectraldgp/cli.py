"""Command line interface.

Subcommands:

    synth       write a synthetic dataset to CSV
    train       fit one model on a CSV table, save a checkpoint
    eval        score a saved checkpoint on a CSV table
    experiment  multi-seed train/evaluate run from a TOML config
    sweep       the same experiment across a list of frequency counts
    gradcheck   finite-difference validation of the training objective

Configuration comes from an optional TOML file plus flag overrides; flags win
over the file, the file wins over built-in defaults. Exit codes: 0 success,
1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import dgp, fourier
from .data import (gen_modulated, gen_multistep, load_csv,
                   mean_log_likelihood, standardized_rmse)
from .experiments import (ConfigError, ExperimentConfig, run_experiment,
                          run_sweep)
from .numerics import make_rng, standard_normal
from .training import TrainConfig, model_gradcheck, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the validation code on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _load_toml(path: str) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def _pick(flag, config: dict, key: str, default):
    """Flag beats config file beats default."""
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _int_list(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"frequencies: not a comma-separated int list:"
                          f" {text!r}") from None


def _float_list(text: str) -> list[float]:
    return [float(c) for c in text.split(",") if c.strip()]


def _interval(flag, section: dict) -> tuple[float, float]:
    """Projection interval from an `--interval a,b` flag or a TOML pair."""
    raw = _float_list(flag) if flag is not None else section.get(
        "interval", fourier.DEFAULT_INTERVAL)
    try:
        a, b = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"interval: expected two endpoints [a, b], got {raw!r}") from None
    return (a, b)


def _write_csv(path: str, X: np.ndarray, y: np.ndarray,
               names: tuple[str, ...]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join([*names, "y"]) + "\n")
        for i in range(X.shape[0]):
            cells = [repr(float(v)) for v in X[i]] + [repr(float(y[i]))]
            f.write(",".join(cells) + "\n")


def _dataset_from_config(section: dict, csv_path: str | None):
    """Build the experiment dataset from [data] or a CSV path."""
    if csv_path is not None:
        name = os.path.splitext(os.path.basename(csv_path))[0]
        return load_csv(csv_path), name
    if not section:
        raise ConfigError("data: need a [data] section or --data CSV path")
    kind = section.get("kind")
    seed = int(section.get("seed", 0))
    n = int(section.get("n", 500))
    noise = float(section.get("noise", 0.05))
    if kind == "multistep":
        kw = {}
        if "levels" in section:
            kw["levels"] = tuple(section["levels"])
        if "boundaries" in section:
            kw["boundaries"] = tuple(section["boundaries"])
        return gen_multistep(n, noise=noise, rng=make_rng(seed), **kw), kind
    if kind == "modulated":
        return gen_modulated(
            n, carrier=float(section.get("carrier", 3.5)),
            envelope=float(section.get("envelope", 1.0)),
            noise=noise, rng=make_rng(seed)), kind
    if kind == "csv":
        if "path" not in section:
            raise ConfigError("data.path: required when data.kind = 'csv'")
        path = section["path"]
        return load_csv(path), os.path.splitext(os.path.basename(path))[0]
    raise ConfigError(f"data.kind: unknown {kind!r}, expected multistep,"
                      f" modulated, or csv")


def _train_config(args, section: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        iters=int(_pick(args.iters, section, "iters", 2000)),
        lr=float(_pick(args.lr, section, "lr", 1e-2)),
        batch=int(_pick(args.batch, section, "batch", 256)),
        s_train=int(section.get("s_train", 5)),
        seed=seed,
        checkpoint_every=int(section.get("checkpoint_every", 200)))


def _experiment_config(args, config: dict) -> tuple[ExperimentConfig, dict]:
    exp = config.get("experiment", {})
    seed_flag = getattr(args, "seed", None)
    seeds = ([int(seed_flag)] if seed_flag is not None
             else [int(s) for s in exp.get("seeds", range(10))])
    cfg = ExperimentConfig(
        name=str(exp.get("name", "experiment")),
        method=str(_pick(args.method, exp, "method", "id-dgp")),
        n_layers=int(_pick(args.layers, exp, "layers", 2)),
        m=int(_pick(getattr(args, "frequencies", None), exp,
                    "frequencies", 20)),
        family=str(exp.get("family", "matern32")),
        train=_train_config(args, config.get("train", {}), seeds[0]),
        test_fraction=float(exp.get("test_fraction", 0.4)),
        seeds=tuple(seeds),
        s_eval=int(exp.get("s_eval", 100)),
        interval=_interval(getattr(args, "interval", None), exp),
        out_dir=str(_pick(args.out, exp, "out", "runs")))
    cfg.validate()
    return cfg, config.get("data", {})


def _cmd_synth(args) -> int:
    rng = make_rng(args.seed)
    if args.generator == "multistep":
        kw = {}
        if args.levels is not None:
            kw["levels"] = tuple(_float_list(args.levels))
        if args.boundaries is not None:
            kw["boundaries"] = tuple(_float_list(args.boundaries))
        d = gen_multistep(args.n, noise=args.noise, rng=rng, **kw)
    else:
        d = gen_modulated(args.n, carrier=args.carrier,
                          envelope=args.envelope, noise=args.noise, rng=rng)
    _write_csv(args.out, d.X, d.y, d.feature_names)
    print(f"wrote {d.n} rows to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    exp = config.get("experiment", {})
    seed = int(_pick(args.seed, exp, "seed", 0))
    method = str(_pick(args.method, exp, "method", "id-dgp"))
    layers = int(_pick(args.layers, exp, "layers", 2))
    m = int(_pick(args.frequencies, exp, "frequencies", 20))
    family = str(exp.get("family", "matern32"))
    interval = _interval(getattr(args, "interval", None), exp)

    d = load_csv(args.data)
    y_mean, y_std = float(np.mean(d.y)), float(np.std(d.y))
    if y_std <= 0.0:
        raise ConfigError("data: targets are constant, cannot standardize")
    y_sd = (d.y - y_mean) / y_std

    spec = dgp.make_spec(method, d_in=d.d, n_layers=layers, m=m,
                         family=family, interval=interval)
    params, norms = dgp.init_params(spec, d.X, make_rng((seed, 2)))
    tcfg = _train_config(args, config.get("train", {}), seed)
    tcfg = dataclasses.replace(tcfg, trace_path=args.out + ".trace.jsonl")
    result = train(spec, params, norms, d.X, y_sd[:, None], tcfg)
    dgp.save_checkpoint(args.out, spec, params, norms, extra={
        "method": method, "seed": seed, "aborted": result.aborted,
        "y_mean": y_mean, "y_std": y_std, "final_elbo": result.final_elbo})
    if result.aborted:
        print(f"training diverged at iteration {result.n_iters}; restored"
              f" checkpoint from iteration {result.restored_iter}",
              file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained {method} ({spec.n_layers} layers, {m} frequencies) for"
          f" {result.n_iters} iterations, final ELBO {result.final_elbo:.3f},"
          f" saved to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    spec, params, norms, extra = dgp.load_checkpoint(args.model)
    d = load_csv(args.data)
    if d.d != spec.layers[0].d_in:
        raise ConfigError(
            f"data: {d.d} features but the model expects"
            f" {spec.layers[0].d_in}")
    y_mean, y_std = float(extra["y_mean"]), float(extra["y_std"])
    rng = make_rng((args.seed, 3))
    mean, _ = dgp.predict_moments(spec, params, norms, d.X, args.s_eval, rng)
    pred = mean[:, 0] * y_std + y_mean
    srmse = standardized_rmse(pred, d.y, y_std)
    logdens = dgp.predict_density(spec, params, norms, d.X,
                                  (d.y - y_mean) / y_std, args.s_eval, rng)
    ll = mean_log_likelihood(logdens, y_std)
    print(f"n={d.n} srmse={srmse:.6f} mean_log_lik={ll:.6f}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    cfg, data_section = _experiment_config(args, config)
    dataset, name = _dataset_from_config(data_section, args.data)
    if cfg.name == "experiment":
        cfg = dataclasses.replace(cfg, name=name)
    records = run_experiment(cfg, dataset)
    print(f"{len(records)}/{len(cfg.seeds)} seeds finished; results in"
          f" {os.path.join(cfg.out_dir, 'results.jsonl')}")
    if not records:
        return EXIT_RUNTIME
    srmse = np.median([r.srmse for r in records])
    print(f"median srmse {srmse:.4f} over {len(records)} seeds")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    m_values = _int_list(args.frequencies) if args.frequencies else \
        [int(m) for m in config.get("sweep", {}).get("frequencies",
                                                     (5, 10, 20, 40, 80))]
    args.frequencies = None
    cfg, data_section = _experiment_config(args, config)
    dataset, name = _dataset_from_config(data_section, args.data)
    if cfg.name == "experiment":
        cfg = dataclasses.replace(cfg, name=name)
    records = run_sweep(cfg, m_values, dataset)
    print(f"{len(records)} records over M in {m_values}; results in"
          f" {os.path.join(cfg.out_dir, 'results.jsonl')}")
    return EXIT_OK if records else EXIT_RUNTIME


def _cmd_gradcheck(args) -> int:
    rng = make_rng(args.seed)
    X = np.sort(rng.uniform(0.0, 1.0, size=(args.n, 1)), axis=0)
    y = np.sin(6.0 * X[:, 0:1]) + 0.1 * standard_normal(rng, (args.n, 1))
    spec = dgp.make_spec(args.method, d_in=1, n_layers=args.layers,
                         m=args.frequencies)
    params, norms = dgp.init_params(spec, X, make_rng((args.seed, 2)))
    reports = model_gradcheck(spec, params, norms, X, y, s=args.samples,
                              seed=args.seed)
    for r in reports:
        print(r.line())
    n_bad = sum(1 for r in reports if not r.passed)
    print(f"{len(reports) - n_bad}/{len(reports)} slots passed")
    return EXIT_OK if n_bad == 0 else EXIT_VALIDATION


def build_parser() -> _Parser:
    parser = _Parser(prog="spectraldgp",
                     description="Deep Gaussian processes with Fourier"
                                 " feature inducing variables")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="write a synthetic CSV",
                       description="Generate a synthetic dataset as CSV.")
    p.add_argument("generator", choices=("multistep", "modulated"),
                   help="which generator to run")
    p.add_argument("--n", type=int, default=500, help="number of rows")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--noise", type=float, default=0.05,
                   help="observation noise standard deviation")
    p.add_argument("--carrier", type=float, default=3.5,
                   help="modulated: carrier cycles per unit interval")
    p.add_argument("--envelope", type=float, default=1.0,
                   help="modulated: envelope amplitude")
    p.add_argument("--levels", default=None,
                   help="multistep: comma list of plateau levels")
    p.add_argument("--boundaries", default=None,
                   help="multistep: comma list of interior breakpoints")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit a model on a CSV table",
                       description="Train one model on every row of a CSV"
                                   " and save a checkpoint.")
    p.add_argument("--data", required=True, help="training CSV (target last)")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--method", default=None,
                   help="id-dgp, dgp-dsvi, gp-vff, or gp-svi")
    p.add_argument("--layers", type=int, default=None, help="layer count")
    p.add_argument("--frequencies", type=int, default=None,
                   help="frequencies (spectral) or inducing points (local)")
    p.add_argument("--interval", default=None,
                   help="projection interval as 'a,b' (spectral methods)")
    p.add_argument("--lr", type=float, default=None, help="Adam step size")
    p.add_argument("--iters", type=int, default=None, help="iterations")
    p.add_argument("--batch", type=int, default=None, help="minibatch size")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a CSV table",
                       description="Evaluate a saved model; reports"
                                   " standardized RMSE and mean predictive"
                                   " log likelihood.")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="evaluation CSV")
    p.add_argument("--s-eval", dest="s_eval", type=int, default=100,
                   help="Monte Carlo samples for prediction")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="multi-seed experiment",
                       description="Split, train, and evaluate over a seed"
                                   " list; emits results.jsonl, summary.csv,"
                                   " traces, checkpoints, and plot data.")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--data", default=None,
                   help="CSV dataset (overrides the [data] section)")
    p.add_argument("--method", default=None, help="method id")
    p.add_argument("--layers", type=int, default=None, help="layer count")
    p.add_argument("--frequencies", type=int, default=None,
                   help="frequencies or inducing points")
    p.add_argument("--interval", default=None,
                   help="projection interval as 'a,b' (spectral methods)")
    p.add_argument("--lr", type=float, default=None, help="Adam step size")
    p.add_argument("--iters", type=int, default=None, help="iterations")
    p.add_argument("--batch", type=int, default=None, help="minibatch size")
    p.add_argument("--seed", type=int, default=None,
                   help="run this single seed instead of the config list")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("sweep", help="experiment across frequency counts",
                       description="Rerun the experiment for each M in a"
                                   " comma list, shared output directory.")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--data", default=None, help="CSV dataset")
    p.add_argument("--method", default=None, help="method id")
    p.add_argument("--layers", type=int, default=None, help="layer count")
    p.add_argument("--frequencies", default=None,
                   help="comma list of M values, e.g. 5,10,20,40,80")
    p.add_argument("--interval", default=None,
                   help="projection interval as 'a,b' (spectral methods)")
    p.add_argument("--lr", type=float, default=None, help="Adam step size")
    p.add_argument("--iters", type=int, default=None, help="iterations")
    p.add_argument("--batch", type=int, default=None, help="minibatch size")
    p.add_argument("--seed", type=int, default=None, help="single seed")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="validate gradients",
                       description="Finite-difference check of the training"
                                   " objective on a small synthetic fixture;"
                                   " prints one line per parameter slot.")
    p.add_argument("--method", default="id-dgp", help="method id")
    p.add_argument("--layers", type=int, default=2, help="layer count")
    p.add_argument("--frequencies", type=int, default=3,
                   help="frequencies or inducing points")
    p.add_argument("--n", type=int, default=8, help="fixture size")
    p.add_argument("--samples", type=int, default=2,
                   help="Monte Carlo samples in the objective")
    p.add_argument("--seed", type=int, default=0, help="fixture seed")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
