from __future__ import annotations

import argparse

from app.commands.common import load_classifier, load_language_model, show
from app.services.metrics import evaluate_system, read_pairs, report_frame, write_report


def _run(args: argparse.Namespace) -> int:
    originals, rewrites = read_pairs(args.pairs)
    row = evaluate_system(args.system, rewrites, originals, load_classifier(args.classifier), load_language_model(args.lm))
    write_report([row], args.out)
    show(report_frame([row]))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="Automatic evaluation of rewrite pairs")
    commands = parser.add_subparsers(dest="action", required=True)
    run = commands.add_parser("run", help="App., Sim., NES., PPL and GM for one system")
    run.add_argument("--pairs", required=True, help="TSV with original and rewrite columns")
    run.add_argument("--classifier", required=True)
    run.add_argument("--lm", required=True)
    run.add_argument("--system", default="system")
    run.add_argument("--out", required=True)
    run.set_defaults(handler=_run)
