import argparse
import logging
import sys
from typing import List, Optional

import torch

from app.commands import corpus, eval as evaluation, exemplar, policy, ppo, rank, run
from app.utils.errors import RealignError
from config.settings import settings

logger = logging.getLogger(__name__)

COMMANDS = (corpus, policy, ppo, evaluation, exemplar, rank, run)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="realign",
        description="Reinforcement learning from machine feedback for appropriate argument rewriting",
    )
    parser.add_argument("--version", action="version", version=f"{settings.project_name} {settings.version}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(settings.torch_threads)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except RealignError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
