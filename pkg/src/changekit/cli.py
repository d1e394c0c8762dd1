"""Command-line interface.

Subcommands: gen-data, train, eval, predict, report.
Exit codes: 0 success, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import harness

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset root directory")
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--objects", type=int, nargs=2, default=(4, 8), metavar=("MIN", "MAX"))
    p.add_argument("--change-rate", type=float, default=0.5)
    p.add_argument("--train-tiles", type=int, default=512)
    p.add_argument("--val-pairs", type=int, default=0)
    p.add_argument("--test-pairs", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bitemporal-train", action="store_true",
                   help="write the train split as true pairs instead of single tiles")


def _add_train(sub):
    p = sub.add_parser("train", help="train a change detector")
    p.add_argument("--data", type=Path, required=True, help="dataset root")
    p.add_argument("--out", type=Path, required=True, help="run output directory")
    p.add_argument("--config", type=Path, help="TOML training config")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--lr-gamma", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--supervision", choices=["single_temporal", "bitemporal"])
    p.add_argument("--backbone", type=str)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--self-contrast-p", type=float)


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on a bitemporal split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--record", type=Path, help="append a JSON-lines metric record here")
    p.add_argument("--error-maps", type=Path, help="directory for TP/FP/FN PNG rasters")


def _add_predict(sub):
    p = sub.add_parser("predict", help="write change-map PNGs for a bitemporal split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)


def _add_report(sub):
    p = sub.add_parser("report", help="emit plot-ready CSV curves from run logs")
    p.add_argument("--logs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changekit")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_predict(sub)
    _add_report(sub)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = data_mod.SyntheticWorldConfig(
        tile_size=args.tile_size,
        num_classes=args.num_classes,
        object_count_range=tuple(args.objects),
        change_rate=args.change_rate,
        background_texture_seed=args.seed,
    )
    rng = np.random.default_rng(args.seed)
    if args.bitemporal_train:
        train = data_mod.gen_bitemporal_eval(cfg, args.train_tiles, rng)
        data_mod.write_dataset(args.out, "train", cfg, samples_bitemporal=train)
    else:
        train = data_mod.gen_single_temporal(cfg, args.train_tiles, rng)
        data_mod.write_dataset(args.out, "train", cfg, samples_single=train)
    if args.val_pairs:
        val = data_mod.gen_bitemporal_eval(cfg, args.val_pairs, rng)
        data_mod.write_dataset(args.out, "val", cfg, samples_bitemporal=val)
    if args.test_pairs:
        test = data_mod.gen_bitemporal_eval(cfg, args.test_pairs, rng)
        data_mod.write_dataset(args.out, "test", cfg, samples_bitemporal=test)
    print(f"wrote dataset to {args.out}")
    return 0


_TRAIN_OVERRIDES = [
    "max_steps", "batch_size", "base_lr", "lr_gamma", "momentum",
    "weight_decay", "seed", "supervision", "backbone", "eval_every",
]


def _cmd_train(args) -> int:
    if args.config is not None:
        cfg = harness.config_from_toml(args.config)
    else:
        cfg = harness.TrainConfig()
    raw = harness.config_to_dict(cfg)
    for name in _TRAIN_OVERRIDES:
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    if args.self_contrast_p is not None:
        raw["pairing"]["self_contrast_p"] = args.self_contrast_p
    cfg = harness.config_from_dict(raw)
    result = harness.train(cfg, args.data, args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    result = harness.evaluate(args.checkpoint, args.data, args.split,
                              args.threshold, args.record, args.error_maps)
    print(json.dumps(harness._flatten(result), indent=2))
    return 0


def _cmd_predict(args) -> int:
    written = harness.predict(args.checkpoint, args.data, args.split,
                              args.out, args.threshold)
    print(f"wrote {len(written)} change maps to {args.out}")
    return 0


def _cmd_report(args) -> int:
    written = harness.report(args.logs, args.out)
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (data_mod.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
