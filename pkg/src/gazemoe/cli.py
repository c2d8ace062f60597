"""Command-line entry point: ``gazemoe {train,eval,gradcheck,route-stats,ablate,make-data}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from gazemoe.checkpoint import read_checkpoint, restore_model, save_checkpoint
from gazemoe.config import PROFILES, RunConfig, load_config
from gazemoe.data import load_dataset, make_dataset, save_dataset
from gazemoe.diagnostics import GRADCHECK_STEP, format_gradcheck, format_route_stats, route_stats, run_gradcheck
from gazemoe.errors import ConfigError, ContractError, GazeMoEError
from gazemoe.train import (
    ABLATION_AXES,
    Splits,
    evaluate,
    format_ablation,
    load_splits,
    run_ablation,
    summary,
    timed_train,
    write_summary,
)

CHECKPOINT_NAME = "model.gzmx"
METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "summary.json"
DATASET_NAME = "dataset.gzds"


def _parse_set(items: List[str]) -> Dict[str, object]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = tomli.loads(f"v = {value.strip()}")["v"]
        except tomli.TOMLDecodeError:
            out[key.strip()] = value.strip()  # bare string
    return out


def _config(args, default_profile: Optional[str] = None) -> RunConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, args.profile or (None if args.config else default_profile), overrides)


def _splits(args, cfg: RunConfig) -> Splits:
    if getattr(args, "data", None):
        return Splits(*load_dataset(args.data))
    return load_splits(cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.dumps())
    result, elapsed = timed_train(cfg, splits=_splits(args, cfg), metrics_path=out / METRICS_NAME)
    save_checkpoint(out / CHECKPOINT_NAME, cfg, result.model, result.optimizer, result.steps)
    write_summary(out / SUMMARY_NAME, summary(cfg, result, elapsed))
    final = result.final
    print(f"trained {result.steps} steps in {elapsed:.1f}s: val {final.val_error_deg:.2f} deg, "
          f"test {final.test_error_deg:.2f} deg -> {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    splits = _splits(args, ckpt.config)
    err = evaluate(model, splits.get(args.split))
    print(f"{args.split} mean angular error: {err:.2f} deg")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args, default_profile="tiny")
    report = run_gradcheck(cfg, step=args.step, corrupt_group=args.corrupt_group)
    print(format_gradcheck(report))
    return 0 if report.passed else 1


def cmd_route_stats(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    if not ckpt.config.train.moe_enabled:
        raise ContractError("route-stats needs an MoE checkpoint; this one was trained with "
                            "train.moe_enabled = false (dense feed-forward control), which has no router")
    model = restore_model(ckpt)
    splits = _splits(args, ckpt.config)
    text = format_route_stats(route_stats(model, splits.get(args.split)))
    print(text)
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "route_stats.tsv").write_text(text + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = run_ablation(args.axis, cfg, seeds)
    table = format_ablation(rows)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.tsv").write_text(table)
    print(table, end="")
    return 0


def cmd_make_data(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_dataset(cfg.data.n, cfg.data_seed, cfg.data.image_size)
    save_dataset(out / DATASET_NAME, splits)
    print(f"wrote {sum(len(s) for s in splits)} samples to {out / DATASET_NAME}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--profile", choices=PROFILES, help="base profile (default: desk, or the config's)")
    common.add_argument("--seed", type=int, help="run seed; also the data seed unless data.seed is set")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="gazemoe", description="Train and inspect prototype-conditioned MoE gaze estimators.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and write metrics, summary and checkpoint")
    p.add_argument("--data", type=Path, help="dataset file from make-data (default: regenerate)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "mean angular error of a checkpoint"),
                                 ("route-stats", cmd_route_stats, "per-expert router utilization")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("checkpoint", type=Path)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--data", type=Path, help="dataset file from make-data (default: regenerate)")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full pipeline")
    p.add_argument("--step", type=float, default=GRADCHECK_STEP, help="central-difference step")
    p.add_argument("--corrupt-group", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation table")
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-data", parents=[common], help="write the synthetic dataset to a file")
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except GazeMoEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
