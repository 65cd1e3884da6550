"""Command-line entry point: ``efpkd --dataset synthetic --strategy efpkd,fedavg --seed 0,1,2``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import DATASETS, ConfigError, build_config, load_config
from .experiment import StageFailure, run_experiment


def _csv_list(kind):
    def parse(text: str):
        try:
            return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list value {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="efpkd", description="Federated prototype/distillation intrusion-detection lab")
    p.add_argument("--config", help="INI file with an [experiment] section; flags override its values")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--train", dest="train_path", help="training CSV (not needed for the synthetic dataset)")
    p.add_argument("--test", dest="test_path", help="test CSV; without it a share of the training file is held out")
    p.add_argument("--mode", choices=("binary", "multi"))
    p.add_argument("--strategy", dest="strategies", type=_csv_list(str), help="comma-separated strategy names")
    p.add_argument("--clients", dest="n_clients", type=int)
    p.add_argument("--delta", type=float, help="Dirichlet concentration for the client split")
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", dest="seeds", type=_csv_list(int), help="comma-separated seeds")
    p.add_argument("--topk", dest="top_k", type=int)
    p.add_argument("--avail-p", dest="availability_probability", type=float)
    p.add_argument("--out")
    p.add_argument("--desk-scale", dest="desk_scale", action="store_const", const=True,
                   help="cap train/test rows at 10k/2k and shrink the teacher")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    try:
        cfg = load_config(args.config, overrides) if args.config else build_config(None, overrides)
    except ConfigError as exc:
        print(f"efpkd: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        run_experiment(cfg)
    except StageFailure as exc:
        print(f"efpkd: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return 1
    print(f"reports written to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
