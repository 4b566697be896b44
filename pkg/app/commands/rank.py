from __future__ import annotations

import argparse
import logging
from typing import Dict, List

import pandas as pd

from app.commands.common import show
from app.models.schemas import BTResult, Judgment, RewriteSet
from app.services.ranking import (
    DEFAULT_PRIOR,
    annotator_agreement,
    bt_aggregate,
    full_plan,
    mean_absolute_scores,
    rank_distribution,
    read_judgments,
    read_ratings,
    rewrite_sets_from_judgments,
    run_prestudy,
    s_window_plan,
    write_plan,
)
from app.utils.errors import RankingError

logger = logging.getLogger(__name__)

REPORT_STYLES = {"relative": "relative", "absolute": "absolute", "table3b": "relative", "table3a": "absolute"}


def _plan(args: argparse.Namespace) -> int:
    plan = s_window_plan(args.k, args.lambda_) if args.lambda_ else full_plan(args.k)
    if args.out:
        sets = [RewriteSet(set_id=f"set{s + 1}", rewrite_ids=[f"r{i + 1}" for i in range(args.k)]) for s in range(args.sets)]
        write_plan([(rewrite_set, plan) for rewrite_set in sets], args.out)
    for left, right in plan.pairs:
        print(f"{left}\t{right}")
    return 0


def _aggregate_all(judgments: List[Judgment], prior: float) -> List[BTResult]:
    by_set: Dict[str, List[Judgment]] = {}
    for judgment in judgments:
        by_set.setdefault(judgment.set_id, []).append(judgment)
    return [bt_aggregate(by_set[rewrite_set.set_id], rewrite_set, prior) for rewrite_set in rewrite_sets_from_judgments(judgments)]


def _log_agreement(judgments: List[Judgment]) -> None:
    try:
        logger.info(f"Mean inter-annotator correlation: {annotator_agreement(judgments):.3f}")
    except RankingError as exc:
        logger.info(f"Agreement not computed: {exc}")


def _aggregate(args: argparse.Namespace) -> int:
    judgments = read_judgments(args.judgments)
    _log_agreement(judgments)
    rows = [
        {"set_id": result.set_id, "rewrite_id": rewrite_id, "rank": rank, "score": result.scores[rewrite_id]}
        for result in _aggregate_all(judgments, args.prior)
        for rank, rewrite_id in enumerate(result.ranking, start=1)
    ]
    frame = pd.DataFrame(rows, columns=["set_id", "rewrite_id", "rank", "score"])
    if args.out:
        frame.to_csv(args.out, index=False, float_format="%.10g")
    show(frame)
    return 0


def _systems(args: argparse.Namespace, judgments: List[Judgment]) -> Dict[str, str]:
    if args.systems:
        frame = pd.read_csv(args.systems, dtype=str)
        return dict(zip(frame["rewrite_id"], frame["system"]))
    ids = {j.left_id for j in judgments} | {j.right_id for j in judgments}
    if any(":" not in rewrite_id for rewrite_id in ids):
        raise RankingError("rewrite ids must read <set>:<system>, or pass --systems")
    return {rewrite_id: rewrite_id.split(":", 1)[1] for rewrite_id in ids}


def _report(args: argparse.Namespace) -> int:
    if REPORT_STYLES[args.style] == "absolute":
        if not args.ratings:
            raise RankingError("the absolute report needs --ratings")
        table = mean_absolute_scores(read_ratings(args.ratings)).reset_index().rename(columns={"system": "System"})
    else:
        if not args.judgments:
            raise RankingError("the relative report needs --judgments")
        judgments = read_judgments(args.judgments)
        table = rank_distribution(_aggregate_all(judgments, args.prior), _systems(args, judgments))
    if args.out:
        table.to_csv(args.out, sep="\t", index=False, float_format="%.4f")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


def _prestudy(args: argparse.Namespace) -> int:
    frame = run_prestudy(args.sets, args.k, args.annotators, args.noise, args.lambdas, args.seed, args.prior)
    if args.out:
        frame.to_csv(args.out, sep="\t", index=False, float_format="%.4f")
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("rank", help="Comparison plans and Bradley-Terry rank aggregation")
    commands = parser.add_subparsers(dest="action", required=True)

    plan = commands.add_parser("plan", help="S-window plan (or the full plan without --lambda)")
    plan.add_argument("--k", type=int, required=True)
    plan.add_argument("--lambda", dest="lambda_", type=int)
    plan.add_argument("--sets", type=int, default=1)
    plan.add_argument("--out")
    plan.set_defaults(handler=_plan)

    aggregate = commands.add_parser("aggregate", help="Per-set Bradley-Terry scores and rankings")
    aggregate.add_argument("--judgments", required=True)
    aggregate.add_argument("--prior", type=float, default=DEFAULT_PRIOR)
    aggregate.add_argument("--out")
    aggregate.set_defaults(handler=_aggregate)

    report = commands.add_parser("report", help="Relative rank distribution or absolute mean scores")
    report.add_argument("--style", choices=list(REPORT_STYLES), default="relative")
    report.add_argument("--judgments")
    report.add_argument("--systems", help="CSV mapping rewrite_id to system")
    report.add_argument("--ratings")
    report.add_argument("--prior", type=float, default=DEFAULT_PRIOR)
    report.add_argument("--out")
    report.set_defaults(handler=_report)

    prestudy = commands.add_parser("prestudy", help="Sparse plans against the full plan on simulated annotators")
    prestudy.add_argument("--sets", type=int, default=45)
    prestudy.add_argument("--k", type=int, default=6)
    prestudy.add_argument("--annotators", type=int, default=5)
    prestudy.add_argument("--noise", type=float, default=0.2)
    prestudy.add_argument("--lambdas", type=int, nargs="+", default=[2, 3, 4])
    prestudy.add_argument("--seed", type=int, default=0)
    prestudy.add_argument("--prior", type=float, default=DEFAULT_PRIOR)
    prestudy.add_argument("--out")
    prestudy.set_defaults(handler=_prestudy)
