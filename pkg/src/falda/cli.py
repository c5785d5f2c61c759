"""Command-line interface.

Exit codes: 0 on success, 1 on any validation problem (bad flags, bad
config, missing files), 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

from . import diffusion, pipeline, spectral, training
from .config import RunConfig, build_config, parse_config_file
from .errors import ConfigError, DataError, FaldaError
from .nets import FaldaModel, load_manifest, save_manifest


class _UsageError(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(self, message)


def _add_config_overrides(parser):
    parser.add_argument("--config", help="flat key = value configuration file")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                            metavar=f.name.upper(), help=argparse.SUPPRESS)


def _config_from_args(args):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            overrides[key[len("cfg_"):]] = value
    return build_config(file_values, overrides)


def _build_parser():
    parser = _Parser(prog="falda",
                     description="Probabilistic time-series forecasting engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=pipeline.SYNTH_KINDS)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decompose", help="dump one window's three components")
    p.add_argument("--data", required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--k1", type=int, required=True)
    p.add_argument("--k2", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a forecaster")
    _add_config_overrides(p)

    def _data_split_args(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--split-train", type=float, default=0.7)
        p.add_argument("--split-val", type=float, default=0.1)

    p = sub.add_parser("forecast", help="sample an ensemble for one test window")
    _data_split_args(p)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a trained forecaster on the test split")
    _data_split_args(p)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qice-bins", type=int, default=10)
    p.add_argument("--dump-dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify-equivalence",
                       help="check the residual-chain identities numerically")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="render one window's forecast bands as SVG")
    _data_split_args(p)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    return parser


def _dataset_for(model_or_cfg, data_path, split_train=0.7, split_val=0.1, stride=1):
    spec = pipeline.DatasetSpec(
        lookback=model_or_cfg.lookback, horizon=model_or_cfg.horizon,
        stride=stride, split_train=split_train, split_val=split_val)
    return pipeline.ingest(data_path, spec)


def _cmd_synth(args):
    pipeline.synth(args.kind, args.length, args.channels, args.sigma, args.seed,
                   args.out, period=args.period, rho=args.rho, amplitude=args.amplitude)
    print(f"wrote {args.out} (+ sidecar {args.out}.meta)")
    return 0


def _cmd_decompose(args):
    values, names = pipeline.read_series(args.data)
    stop = args.start + args.length
    if args.start < 0 or stop > values.shape[0]:
        raise ConfigError(
            f"window [{args.start}, {stop}) outside the series of length {values.shape[0]}")
    dec = spectral.decompose(values[args.start:stop], args.k1, args.k2)
    with open(args.out, "w") as fh:
        header = ["step"]
        for name in names:
            header += [f"{name}_non", f"{name}_stat", f"{name}_noise"]
        fh.write(",".join(header) + "\n")
        for i in range(args.length):
            row = [str(args.start + i)]
            for d in range(values.shape[1]):
                row += [format(dec.non[i, d], ".17g"),
                        format(dec.stat[i, d], ".17g"),
                        format(dec.noise[i, d], ".17g")]
            fh.write(",".join(row) + "\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_train(args):
    cfg = _config_from_args(args)
    if not cfg.data:
        raise ConfigError("training needs a data path (config key 'data')")
    dataset = _dataset_for(cfg, cfg.data, cfg.split_train, cfg.split_val, cfg.stride)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = FaldaModel(
        lookback=cfg.lookback, horizon=cfg.horizon, channels=dataset.channels,
        k1=cfg.k1, k2=cfg.k2, backbone=cfg.backbone, per_channel=cfg.per_channel,
        mlp_hidden=cfg.mlp_hidden, ns_hidden=cfg.ns_hidden, hidden=cfg.hidden,
        layers=cfg.layers, kernel=cfg.kernel, steps=cfg.steps,
        finetune_step=cfg.finetune_step, ddim_steps=cfg.ddim_steps, eta=cfg.eta,
        seed=cfg.seed, scale_mean=dataset.scale.mean, scale_std=dataset.scale.std,
        rng=pipeline.derive_rng(cfg.seed, 0))
    tcfg = training.TrainConfig(
        pretrain_epochs=cfg.pretrain_epochs, alternate_period=cfg.alternate_period,
        epochs=cfg.epochs, patience=cfg.patience, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, seed=cfg.seed)
    history_path = os.path.join(cfg.out_dir, "history.csv")
    history = training.train(dataset, tcfg, model, history_path=history_path)
    manifest_path = os.path.join(cfg.out_dir, "manifest.txt")
    save_manifest(model, manifest_path)
    print(f"trained {len(history.epochs)} epochs; "
          f"best val point loss {history.best_val_point:.6g} at epoch {history.best_epoch}")
    print(f"wrote {manifest_path} and {history_path}")
    return 0


def _load_for_inference(args):
    model = load_manifest(args.manifest)
    dataset = _dataset_for(model, args.data, args.split_train, args.split_val)
    if dataset.channels != model.channels:
        raise ConfigError(
            f"data has {dataset.channels} channels but the manifest expects {model.channels}")
    split = getattr(dataset, args.split)
    return model, split


def _cmd_forecast(args):
    model, split = _load_for_inference(args)
    if not 0 <= args.window < len(split):
        raise ConfigError(f"window {args.window} outside [0, {len(split)})")
    ensemble = pipeline.forecast_window(model, split, args.window, args.samples, args.seed)
    pipeline.dump_ensemble(ensemble, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args):
    model, split = _load_for_inference(args)
    if args.dump_dir:
        os.makedirs(args.dump_dir, exist_ok=True)
    report = pipeline.evaluate(model, split, args.samples, args.seed,
                               m_bins=args.qice_bins, dump_dir=args.dump_dir)
    report.write(args.out)
    sys.stdout.write(report.render())
    print(f"wrote {args.out}")
    return 0


def _cmd_verify(args):
    if args.steps < 1 or args.trials < 1:
        raise ConfigError("steps and trials must be >= 1")
    schedule = diffusion.linear_schedule(args.steps)
    report = diffusion.verify_equivalence(args.trials, schedule, seed=args.seed)
    print(f"residual-chain equivalence, {args.steps} steps x {args.trials} trials:")
    for line in report.lines():
        print("  " + line)
    return 0 if report.passed else 2


def _cmd_plot(args):
    model, split = _load_for_inference(args)
    if not 0 <= args.window < len(split):
        raise ConfigError(f"window {args.window} outside [0, {len(split)})")
    ensemble = pipeline.forecast_window(model, split, args.window, args.samples, args.seed)
    pipeline.plot_ensemble(ensemble, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "decompose": _cmd_decompose,
    "train": _cmd_train,
    "forecast": _cmd_forecast,
    "eval": _cmd_eval,
    "verify-equivalence": _cmd_verify,
    "plot": _cmd_plot,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FaldaError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
