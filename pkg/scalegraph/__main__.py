"""
Command-line entry point.

Run with: python -m scalegraph <synth|train|baseline|matrix|eval|check> [options]
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import Config, coerce_value
from .harness import (
    EXTRA_AXES,
    evaluate_checkpoint,
    load_data,
    resolve_synth,
    run_baseline,
    run_matrix,
    train,
)
from .checks import SUITES, run_all_checks
from .storage import read_json, save_dataset, write_json
from .synthgen import generate_dataset
from .types import BaselineKind, ConfigurationError, DivergenceError


def _parse_pairs(items: Optional[List[str]], flag: str) -> Dict[str, str]:
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"{flag} expects KEY=VALUE (got {item!r})")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_grid(items: Optional[List[str]]) -> Dict[str, List[Any]]:
    """--grid alpha=0,0.5 --grid modules=a,d -> {"alpha": [0.0, 0.5], "modules": ["a", "d"]}"""
    grid = {}
    for key, raw in _parse_pairs(items, "--grid").items():
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if key in EXTRA_AXES:
            grid[key] = values
        else:
            grid[key] = [coerce_value(key, v) for v in values]
    return grid


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON settings file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    parser.add_argument("--time", action="store_true", help="print wall-clock per seed / cell")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalegraph", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("train", help="train the graph model over all seeds")
    _add_common(p)
    p.add_argument("--name", help="run directory name under the output root")

    p = sub.add_parser("baseline", help="train a pooling baseline over all seeds")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=[k.value for k in BaselineKind])
    p.add_argument("--name")

    p = sub.add_parser("matrix", help="run an ablation / sensitivity grid")
    _add_common(p)
    p.add_argument("--grid", action="append", metavar="AXIS=V1,V2", help="one grid axis")
    p.add_argument("--grid-file", type=Path, help="JSON object of axis -> values")
    p.add_argument("--name", default="matrix")

    p = sub.add_parser("eval", help="recompute test metrics from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint prefix (no suffix)")
    p.add_argument("--bag", help="dump masks, graph and triplets for this bag id")
    p.add_argument("--class", dest="class_of_interest", type=int, help="class for triplets")
    p.add_argument("--out", type=Path, help="write the report as JSON")

    p = sub.add_parser("check", help="run invariant and gradient suites")
    p.add_argument("--only", nargs="+", choices=sorted(SUITES), help="subset of suites")
    p.add_argument("--quiet", action="store_true")
    return parser


def _load_config(args) -> Config:
    overrides: Dict[str, Any] = _parse_pairs(args.set, "--set")
    if args.time:
        overrides["time"] = "true"
    if args.quiet:
        overrides["quiet"] = "true"
    return Config.load(args.config, overrides=overrides)


def run(args) -> int:
    if args.command == "check":
        results = run_all_checks(args.only, quiet=args.quiet)
        failed = [r.name for r in results if not r.passed]
        print(f"[Check] {len(results) - len(failed)}/{len(results)} passed")
        return 1 if failed else 0

    config = _load_config(args)
    run_config = config.snapshot()
    synth = resolve_synth(run_config, config.synth_config())

    if args.command == "synth":
        bags, hierarchy = generate_dataset(synth)
        save_dataset(args.out, bags, hierarchy, generator=synth.to_dict())
        print(f"[Synth] wrote {len(bags)} bags ({hierarchy.num_classes} classes) to {args.out}")
        return 0

    bags, hierarchy = load_data(run_config, synth)
    print(f"[Data] {len(bags)} bags, {hierarchy.num_classes} classes, D={bags[0].dim}")

    if args.command == "train":
        result = train(run_config, bags, hierarchy, run_name=args.name, synth=synth)
        print(f"[Train] outputs in {result.run_dir}")
    elif args.command == "baseline":
        result = run_baseline(args.kind, run_config, bags, hierarchy, run_name=args.name, synth=synth)
        print(f"[Baseline] outputs in {result.run_dir}")
    elif args.command == "matrix":
        grid = parse_grid(args.grid)
        if args.grid_file:
            grid.update(read_json(args.grid_file))
        frame = run_matrix(run_config, grid, bags, hierarchy, run_name=args.name, synth=synth)
        print(f"[Matrix] {len(frame)} rows in {Path(run_config.output_dir) / args.name}")
    elif args.command == "eval":
        report = evaluate_checkpoint(
            run_config, bags, hierarchy, args.checkpoint,
            dump_bag=args.bag, class_of_interest=args.class_of_interest,
        )
        test = report["test"]
        print(f"[Eval] seed={report['seed']} acc={test['accuracy']:.4f} macro_f1={test['macro_f1']:.4f}")
        if args.out:
            write_json(args.out, report)
            print(f"[Eval] report written to {args.out}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ValueError, DivergenceError) as e:
        print(f"[Error] {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
