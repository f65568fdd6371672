"""Command-line entry point: gen-data, labels, train, sweep-L, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import FlexPITError
from .harness import ExperimentConfig, cmd_gen_data, cmd_labels, cmd_report, cmd_sweep_L, cmd_train, format_table
from .trainer import PRESETS


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexpit", description="Label-assignment experiments for two-speaker separation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize train/valid/test datasets")
    p.add_argument("--config", required=True)

    p = sub.add_parser("labels", help="build a fixed label table for a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--strategy", required=True, choices=("energy", "embed"))
    p.add_argument("--out", help="output CSV (default: next to the dataset)")
    p.add_argument("--seed", type=int, default=0, help="clustering seed for embed")

    p = sub.add_parser("train", help="train one preset schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--seed", type=int, default=None, help="default: first entry of the config's seeds")
    p.add_argument("--reference-labels", help="table to measure the label difference against")

    p = sub.add_parser("sweep-L", help="fixed-label training from labels recorded at several epochs")
    p.add_argument("--config", required=True)
    p.add_argument("--L", required=True, type=_int_list, dest="L_values")
    p.add_argument("--ref-L", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("report", help="aggregate run directories into a comparison table")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", default="report", help="directory for table.csv and curves/")
    return parser


def _run(args) -> None:
    if args.command == "gen-data":
        paths = cmd_gen_data(ExperimentConfig.load(args.config))
        for name, path in paths.items():
            print(f"{name}: {path}")
    elif args.command == "labels":
        _, summary = cmd_labels(args.dataset, args.strategy, args.out, args.seed)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "train":
        cfg = ExperimentConfig.load(args.config)
        seed = cfg.seeds[0] if args.seed is None else args.seed
        out = cmd_train(cfg, args.preset, seed, args.reference_labels)
        print(out)
    elif args.command == "sweep-L":
        cfg = ExperimentConfig.load(args.config)
        seed = cfg.seeds[0] if args.seed is None else args.seed
        print(cmd_sweep_L(cfg, args.L_values, seed, args.ref_L).to_csv(), end="")
    elif args.command == "report":
        print(format_table(cmd_report(args.dirs, args.out)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except (FlexPITError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"flexpit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
