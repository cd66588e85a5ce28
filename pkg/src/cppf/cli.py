"""Command line interface: ``cppf run | eval | report | sweep | gen-data``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_arrays
from .config import ConfigError, TrainConfig, parse_config_text
from .data import DatasetError, generate_synthetic, load_dataset, save_dataset, split_phases, train_test_split
from .evaluation import ProbeConfig, ProbeError, linear_probe, per_phase_accuracy
from .report import report
from .sweep import parse_grid, sweep, write_sweep_csv
from .trainer import checkpoint_config, load_encoder, run_experiment

SEED_FLAGS = (("seed_model", "--seed-model"), ("seed_data", "--seed-data"), ("seed_split", "--seed-split"))


class CliError(Exception):
    pass


def _config_from_args(args) -> TrainConfig:
    """Config file values, then explicit flags; a flag may not contradict the file."""
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(), str(path))
    overrides = {}
    for key, flag in SEED_FLAGS:
        value = getattr(args, key)
        if value is None:
            continue
        if key in file_values and file_values[key] != value:
            raise CliError(f"seed conflict: {flag} {value} but {args.config} sets {key} = {file_values[key]}")
        overrides[key] = value
    if getattr(args, "phases", None) is not None:
        overrides["phases"] = args.phases
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        values = parse_config_text(f"{key} = {raw}", "--set")
        overrides.update(values)
    cfg = TrainConfig(**{**file_values, **overrides})
    if getattr(args, "baseline", False):
        cfg = cfg.as_baseline()
    return cfg


def _check_dataset(cfg: TrainConfig) -> TrainConfig:
    """Fail early when a user dataset does not match the configured input width."""
    if not cfg.dataset:
        return cfg
    ds = load_dataset(cfg.dataset)
    if ds.input_dim != cfg.input_dim:
        raise CliError(f"dataset {cfg.dataset} has {ds.input_dim} features but input_dim = {cfg.input_dim}")
    return cfg


def cmd_run(args) -> int:
    out = Path(args.out)
    if args.resume_from:
        ckpt = Path(args.resume_from)
        _, meta = load_arrays(ckpt)
        saved = checkpoint_config(meta)
        cfg = _config_from_args(args) if args.config else saved
        if cfg != saved:
            raise CliError(f"--resume-from {ckpt} was written with a different config")
        for name in ("losses.csv", "metrics.csv", "diagnostics.csv"):
            if not (out / name).exists():
                raise CliError(f"cannot resume: {out / name} is missing")
        result = run_experiment(cfg, out_dir=out, resume_from=ckpt)
    else:
        cfg = _check_dataset(_config_from_args(args))
        ad.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)
        result = run_experiment(cfg, out_dir=out)
    print(f"{'baseline' if cfg.is_baseline else 'cppf'}: A_T = {result.average_accuracy:.4f}  ({out})")
    return 0


def cmd_eval(args) -> int:
    enc, cfg = load_encoder(args.checkpoint)
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        ds = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.input_dim, cfg.difficulty, cfg.seed_data)
    if ds.input_dim != enc.config.input_dim:
        raise CliError(f"dataset has {ds.input_dim} features but the encoder expects {enc.config.input_dim}")
    train, test = train_test_split(ds, args.test_fraction, cfg.seed_data)
    probe = ProbeConfig(cfg.probe_epochs, cfg.probe_lr, cfg.momentum, cfg.probe_batch, seed=cfg.seed_model)
    acc = linear_probe(enc, train.samples, train.labels, test.samples, test.labels, probe)
    print("class  accuracy")
    for c, a in sorted(acc.items()):
        print(f"{c:>5d}  {a:.4f}")
    if ds.num_classes % cfg.phases == 0:
        schedule = split_phases(ds.num_classes, cfg.phases, cfg.seed_data)
        for i, a in per_phase_accuracy(acc, schedule.phase_of_class()).items():
            print(f"phase {i + 1} classes  {a:.4f}")
    print(f"mean per-class accuracy  {np.mean(list(acc.values())):.4f}")
    return 0


def cmd_report(args) -> int:
    metrics_dir = Path(args.metrics)
    if not (metrics_dir / "metrics.csv").exists():
        raise CliError(f"no metrics.csv in {metrics_dir}")
    if args.baseline and not (Path(args.baseline) / "metrics.csv").exists():
        raise CliError(f"no metrics.csv in {args.baseline}")
    print(report(metrics_dir, args.baseline))
    print(f"chart written to {metrics_dir / 'chart.svg'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    grid = dict(parse_grid(g) for g in args.grid)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = sweep(cfg, grid, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        point = " ".join(f"{k}={v}" for k, v in r.point.items())
        print(f"{point}  cppf {r.cppf_mean:.4f}  baseline {r.baseline_mean:.4f}  margin {r.margin:+.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.num_classes, args.per_class, args.input_dim, args.difficulty, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples x {ds.input_dim} features, {ds.num_classes} classes to {args.out}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed-model", dest="seed_model", type=int)
    p.add_argument("--seed-data", dest="seed_data", type=int)
    p.add_argument("--seed-split", dest="seed_split", type=int)
    p.add_argument("--phases", type=int)
    p.add_argument("--dataset", help="binary dataset file or .csv (default: synthetic)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cppf", description="Self-supervised class-incremental training with CPPF.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per phase")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train over all phases and write manifest, checkpoints and CSVs")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true", help="disable PC, ESR and the current teacher")
    p.add_argument("--resume-from", dest="resume_from", help="phase checkpoint inside --out to continue from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="linear-probe a checkpointed encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summary table and chart.svg for a run directory")
    p.add_argument("--metrics", required=True, help="run directory holding metrics.csv")
    p.add_argument("--baseline", help="baseline run directory to overlay")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="CPPF vs baseline over a parameter grid")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=10)
    p.add_argument("--per-class", dest="per_class", type=int, default=200)
    p.add_argument("--input-dim", dest="input_dim", type=int, default=32)
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, CheckpointError, ProbeError, ad.ParameterError, ad.DegenerateInputError) as exc:
        print(f"cppf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"cppf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
