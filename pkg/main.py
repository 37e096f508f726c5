#!/usr/bin/env python3
"""
dgpic - test-time domain generalization for point-cloud in-context learning

    dgpic gen-data|train|estimate-prototypes|eval|ablate --config PATH
          [--force] [--seed N] [--modes LIST] [--out DIR] [--self-check]
          [--target NAME] [--baseline]

Exit codes: 0 success, 2 usage error, 3 data/artifact error, 4 numeric error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

from config.experiment_config import load_config
from config.settings import DGPIC_CONFIG
from modules.errors import DataError, DGPICError, UsageError
from modules.experiment import Experiment

logger = logging.getLogger("DGPIC")

COMMANDS = ("gen-data", "train", "estimate-prototypes", "eval", "ablate")


# ==============================
# LOGGING
# ==============================
def setup_logging(out_dir):
    log_dir = os.path.join(out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, DGPIC_CONFIG["logging"]["level"].upper(), logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.FileHandler(os.path.join(log_dir, "dgpic.log")), logging.StreamHandler()],
        force=True,
    )


# ==============================
# CLI
# ==============================
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="dgpic", description="Domain-generalized point-cloud in-context learning")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file (INI style)")
    parser.add_argument("--force", action="store_true", help="overwrite existing corpus or prototype store")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--modes", help="comma separated shift modes for eval")
    parser.add_argument("--out", help="output directory (overrides [experiment] out_dir)")
    parser.add_argument("--self-check", action="store_true", help="verify CD(target, target) = 0 before eval")
    parser.add_argument("--target", help="held-out target domain (overrides [benchmark] target)")
    parser.add_argument("--baseline", action="store_true", help="add copy-prompt baseline rows")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.target:
        cfg = replace(cfg, benchmark=replace(cfg.benchmark, target=args.target))
    return cfg.validate()


def run(args):
    cfg = resolve_config(args)
    setup_logging(cfg.out_dir)
    experiment = Experiment(cfg)
    seeds = (args.seed,) if args.seed is not None else None
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip()) if args.modes else None
    baseline = True if args.baseline else None

    logger.info(f"🔄 Running '{args.command}' into {cfg.out_dir}")
    try:
        if args.command == "gen-data":
            experiment.cmd_gen_data(force=args.force)
        elif args.command == "train":
            experiment.cmd_train(seeds)
        elif args.command == "estimate-prototypes":
            experiment.cmd_estimate_prototypes(seeds, force=args.force)
        elif args.command == "eval":
            experiment.cmd_eval(modes, seeds, self_check=args.self_check, baseline=baseline)
        else:
            experiment.cmd_ablate(seeds, self_check=args.self_check, baseline=baseline)
    except DGPICError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        raise
    logger.info(f"✅ {args.command} finished")
    return experiment


def main(argv=None):
    try:
        run(build_parser().parse_args(argv))
    except DGPICError as e:
        print(f"dgpic: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"dgpic: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
