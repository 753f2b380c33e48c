"""Command-line entry points.

Subcommands: generate, train, eval, bench, explain. Every TrainConfig
field is available as a --flag; IPS_<FIELD> environment variables override
config-file values, and explicit flags override both. Exit codes: 0 on
success, 2 contract error, 3 numeric error, 4 ledger budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from ..data.megamnist import MegaMnistSpec, generate_megamnist
from ..errors import ContractError, LedgerBudgetExceeded, NumericError
from .config import TrainConfig, resolve_config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, type=str, default=None, metavar="BOOL")
        elif f.type in ("int", int):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.type in ("bool", bool):
            value = str(value).lower() in ("1", "true", "yes", "on")
        overrides[f.name] = value
    return resolve_config(file_path=args.config, environ=os.environ,
                          overrides=overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipsel",
        description="Memory-bounded patch selection and aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--side", type=int, required=True)
    gen.add_argument("--noise", type=int, default=None,
                     help="noise strokes (default: scales linearly with side)")
    gen.add_argument("--train", type=int, default=1000)
    gen.add_argument("--test", type=int, default=200)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--digit-size", type=int, default=28)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train a method on a dataset")
    _add_config_flags(tr)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test")

    be = sub.add_parser("bench", help="benchmark sweeps")
    _add_config_flags(be)
    be.add_argument("--sweep", required=True,
                    choices=["image_sides", "mi_grid", "patch_sizes", "single"])
    be.add_argument("--datasets", default="",
                    help="comma-separated dataset dirs (image_sides sweep)")
    be.add_argument("--grid", default="",
                    help="semicolon-separated M,I pairs (mi_grid sweep)")
    be.add_argument("--patches", default="",
                    help="comma-separated patch sizes (patch_sizes sweep)")
    be.add_argument("--steps", type=int, default=None)
    be.add_argument("--out", required=True)

    ex = sub.add_parser("explain", help="attention map and per-patch classes")
    _add_config_flags(ex)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--index", type=int, default=0)
    ex.add_argument("--split", default="test")
    ex.add_argument("--out", required=True)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "generate":
        spec = MegaMnistSpec(image_side=args.side, noise_line_count=args.noise,
                             train_count=args.train, test_count=args.test,
                             seed=args.seed, digit_size=args.digit_size)
        generate_megamnist(spec, args.out)
        print(f"dataset written to {args.out}")
        return 0

    if args.command == "train":
        from .train import train
        cfg = _config_from_args(args)
        history, run_dir, final_eval = train(cfg)
        acc = " ".join(f"{k}={v:.4f}" for k, v in final_eval["accuracy"].items())
        print(f"run dir: {run_dir}")
        print(f"test accuracy: {acc}")
        return 0

    if args.command == "eval":
        from .evaluate import evaluate_checkpoint
        cfg = _config_from_args(args)
        metrics = evaluate_checkpoint(cfg, args.checkpoint, split_name=args.split)
        for name, value in metrics["accuracy"].items():
            print(f"acc_{name} = {value:.6f}")
        return 0

    if args.command == "bench":
        from .bench import bench_point, bench_scaling, write_bench_csv
        cfg = _config_from_args(args)
        if args.sweep == "single":
            rows = [bench_point(cfg, steps=args.steps)]
        elif args.sweep == "image_sides":
            points = [p for p in args.datasets.split(",") if p]
            rows = bench_scaling(cfg, "image_sides", points, steps=args.steps)
        elif args.sweep == "mi_grid":
            pairs = [tuple(int(v) for v in p.split(",")) for p in
                     args.grid.split(";") if p]
            rows = bench_scaling(cfg, "mi_grid", pairs, steps=args.steps)
        else:
            sizes = [int(p) for p in args.patches.split(",") if p]
            rows = bench_scaling(cfg, "patch_sizes", sizes, steps=args.steps)
        write_bench_csv(rows, args.out)
        print(f"bench table written to {args.out}")
        return 0

    if args.command == "explain":
        from .explain import explain_image
        cfg = _config_from_args(args)
        result = explain_image(cfg, args.checkpoint, args.index, args.out,
                               split_name=args.split)
        print(f"attention map: {result['pgm']}")
        print(f"per-patch csv: {result['csv']}")
        return 0

    raise ContractError(f"unknown command {args.command!r}")


def main() -> None:
    try:
        sys.exit(run())
    except LedgerBudgetExceeded as err:
        print(f"error: {err}", file=sys.stderr)
        sys.exit(4)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        sys.exit(3)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
