from __future__ import annotations

import argparse
import logging

from app.services.pipeline import run_pipeline
from config.experiment import PRESETS, load_experiment

logger = logging.getLogger(__name__)


def _run(args: argparse.Namespace) -> int:
    config = load_experiment(args.config, args.preset, args.seed)
    manifest = run_pipeline(config, args.out)
    logger.info(f"Run {config.name} complete; config hash {manifest.config_hash[:12]}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="Corpus, scorers, pretraining, PPO sweep and evaluation end to end")
    parser.add_argument("--config")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.set_defaults(handler=_run)
