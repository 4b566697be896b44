from __future__ import annotations

import argparse
import json

from app.services.exemplar import (
    DEFAULT_DAMPING,
    HashedEmbedder,
    load_embeddings,
    save_embeddings,
    select_all_exemplars,
    select_exemplar,
)
from app.services.scorers import DIMENSIONS

DEFAULT_EMBEDDINGS = "embeddings.jsonl"


def _embed(args: argparse.Namespace) -> int:
    with open(args.input, encoding="utf-8") as handle:
        rows = [json.loads(line) for line in handle if line.strip()]
    arguments = HashedEmbedder(args.features).embed_arguments(
        [row["id"] for row in rows], [row["text"] for row in rows], [row.get("scores", {}) for row in rows]
    )
    save_embeddings(arguments, args.out)
    return 0


def _select(args: argparse.Namespace) -> int:
    arguments = load_embeddings(args.embeddings)
    if args.dim == "all":
        for dimension, argument_id in select_all_exemplars(arguments, args.damping).items():
            print(f"{dimension}\t{argument_id}")
    else:
        print(select_exemplar(arguments, args.dim, args.damping))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("exemplar", help="Few-shot exemplar selection by PageRank centrality")
    commands = parser.add_subparsers(dest="action", required=True)

    embed = commands.add_parser("embed", help="Hashed bag-of-words embeddings for id/text/scores JSON Lines")
    embed.add_argument("--in", dest="input", required=True)
    embed.add_argument("--features", type=int, default=1024)
    embed.add_argument("--out", default=DEFAULT_EMBEDDINGS)
    embed.set_defaults(handler=_embed)

    select = commands.add_parser("select", help="Most central argument among the top-scored for a dimension")
    select.add_argument("--embeddings", default=DEFAULT_EMBEDDINGS, help="output of `exemplar embed`")
    select.add_argument("--dim", required=True, choices=[*DIMENSIONS, "all"])
    select.add_argument("--damping", type=float, default=DEFAULT_DAMPING)
    select.set_defaults(handler=_select)
