from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import pearsonr
from sklearn.metrics import ndcg_score

from app.models.schemas import (
    BTResult,
    ComparisonPlan,
    Judgment,
    PlanGenerator,
    RankMetrics,
    Rating,
    RewriteSet,
)
from app.services.metrics import gm3
from app.utils.errors import RankingError

logger = logging.getLogger(__name__)

DEFAULT_PRIOR = 0.1
BT_TOLERANCE = 1e-10
ABSOLUTE_CRITERIA = ("appropriateness", "similarity", "fluency")


# ---------------------------------------------------------------- plans


def full_plan(k: int, set_id: Optional[str] = None) -> ComparisonPlan:
    if k < 2:
        raise RankingError(f"a comparison plan needs k >= 2, got {k}")
    pairs = list(itertools.combinations(range(1, k + 1), 2))
    return ComparisonPlan(k=k, pairs=pairs, generator=PlanGenerator.FULL, set_id=set_id)


def s_window_plan(k: int, lambda_: int, set_id: Optional[str] = None) -> ComparisonPlan:
    """j = 1 + (b mod k) for b = i + m*lambda - 1, m = 1..k-1; self-pairs skipped, pairs unordered."""
    if k < 2:
        raise RankingError(f"a comparison plan needs k >= 2, got {k}")
    if not 1 <= lambda_ <= k:
        raise RankingError(f"skip size {lambda_} outside 1..{k}")
    pairs = set()
    for i in range(1, k + 1):
        for m in range(1, k):
            j = 1 + ((i + m * lambda_ - 1) % k)
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    return ComparisonPlan(k=k, pairs=sorted(pairs), lambda_=lambda_, generator=PlanGenerator.S_WINDOW, set_id=set_id)


# ---------------------------------------------------------------- aggregation


def _win_matrix(judgments: Iterable[Judgment], rewrite_set: RewriteSet) -> np.ndarray:
    index = {rewrite_id: i for i, rewrite_id in enumerate(rewrite_set.rewrite_ids)}
    wins = np.zeros((rewrite_set.k, rewrite_set.k))
    for judgment in judgments:
        if judgment.set_id != rewrite_set.set_id:
            continue
        unknown = {judgment.left_id, judgment.right_id} - index.keys()
        if unknown:
            raise RankingError(f"judgment references rewrites {sorted(unknown)} outside set {rewrite_set.set_id}")
        wins[index[judgment.winner_id], index[judgment.loser_id]] += 1.0
    return wins


def _components(graph: np.ndarray, ids: Sequence[str], connection: str) -> List[List[str]]:
    count, labels = connected_components(csr_matrix(graph), directed=True, connection=connection)
    return [[ids[i] for i in np.flatnonzero(labels == c)] for c in range(count)]


def bt_aggregate(
    judgments: Sequence[Judgment],
    rewrite_set: RewriteSet,
    prior: float = DEFAULT_PRIOR,
    tol: float = BT_TOLERANCE,
    max_iter: int = 1_000_000,
) -> BTResult:
    """Bradley-Terry scores by minorization-maximization.

    ``prior`` adds that many virtual wins in each direction on every pair of the set.
    """
    if prior < 0:
        raise RankingError("prior must be nonnegative")
    ids = rewrite_set.rewrite_ids
    wins = _win_matrix(judgments, rewrite_set)
    if prior > 0:
        wins = wins + prior * (1.0 - np.eye(rewrite_set.k))
    else:
        undirected = _components((wins + wins.T) > 0, ids, "weak")
        if len(undirected) > 1:
            raise RankingError("comparison graph is disconnected", undirected)
        strong = _components(wins > 0, ids, "strong")
        if len(strong) > 1:
            raise RankingError("maximum likelihood diverges: some rewrites never win against their component", strong)

    games = wins + wins.T
    won = wins.sum(axis=1)
    scores = np.full(rewrite_set.k, 1.0 / rewrite_set.k)
    change, iterations, converged = np.inf, 0, False
    while iterations < max_iter:
        iterations += 1
        denominators = (games / (scores[:, None] + scores[None, :])).sum(axis=1)
        updated = won / denominators
        updated /= updated.sum()
        change = float(np.max(np.abs(updated - scores) / scores))
        scores = updated
        if change < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"Bradley-Terry for set {rewrite_set.set_id} stopped after {iterations} iterations (change {change:.2e})")

    values = {rewrite_id: float(score) for rewrite_id, score in zip(ids, scores)}
    ranking = sorted(ids, key=lambda rewrite_id: (-round(values[rewrite_id], 12), rewrite_id))
    return BTResult(
        set_id=rewrite_set.set_id,
        scores=values,
        ranking=ranking,
        iterations=iterations,
        converged=converged,
        max_relative_change=change,
    )


# ---------------------------------------------------------------- metrics


def rank_metrics(predicted: BTResult, baseline: BTResult) -> RankMetrics:
    if set(predicted.scores) != set(baseline.scores):
        raise RankingError("predicted and baseline results rank different rewrites")
    ids = sorted(baseline.scores)
    x = np.array([predicted.scores[i] for i in ids])
    y = np.array([baseline.scores[i] for i in ids])
    pearson = None
    if np.ptp(x) > 0 and np.ptp(y) > 0:
        pearson = float(pearsonr(x, y)[0])
    ndcg = float(ndcg_score(y[None, :], x[None, :], k=1))
    return RankMetrics(pearson=pearson, ndcg_at_1=ndcg)


def rank_distribution(results: Sequence[BTResult], systems: Mapping[str, str]) -> pd.DataFrame:
    """Per-system share of sets at each rank position, average rank and mean latent score."""
    if not results:
        raise RankingError("no ranking results to summarize")
    roster: Optional[set] = None
    positions: Dict[str, List[int]] = {}
    latent: Dict[str, List[float]] = {}
    for result in results:
        unmapped = [rewrite_id for rewrite_id in result.ranking if rewrite_id not in systems]
        if unmapped:
            raise RankingError(f"set {result.set_id}: no system mapped for rewrite ids {unmapped}")
        names = [systems[rewrite_id] for rewrite_id in result.ranking]
        if roster is None:
            roster = set(names)
        if set(names) != roster or len(names) != len(roster):
            raise RankingError(f"set {result.set_id} ranks a different system roster")
        for rank, rewrite_id in enumerate(result.ranking, start=1):
            positions.setdefault(systems[rewrite_id], []).append(rank)
            latent.setdefault(systems[rewrite_id], []).append(result.scores[rewrite_id])

    k = len(roster)
    rows = []
    for system in sorted(positions):
        ranks = np.array(positions[system])
        row = {"System": system}
        for rank in range(1, k + 1):
            row[f"Rank {rank}"] = 100.0 * float(np.mean(ranks == rank))
        row["Avg."] = float(ranks.mean())
        row["Mean p"] = float(np.mean(latent[system]))
        rows.append(row)
    return pd.DataFrame(rows).sort_values(["Avg.", "System"]).reset_index(drop=True)


def _verdicts(judgments: Sequence[Judgment]) -> Dict[str, Dict[Tuple[str, str, str], float]]:
    coded: Dict[str, Dict[Tuple[str, str, str], float]] = {}
    for judgment in judgments:
        first, second = judgment.pair
        coded.setdefault(judgment.annotator_id, {})[(judgment.set_id, first, second)] = (
            1.0 if judgment.winner_id == first else -1.0
        )
    return coded


def annotator_agreement(judgments: Sequence[Judgment]) -> float:
    """Mean pairwise Pearson correlation of +/-1 verdicts on the pairs two annotators share."""
    coded = _verdicts(judgments)
    if len(coded) < 2:
        raise RankingError("agreement needs at least two annotators")
    correlations = []
    for a, b in itertools.combinations(sorted(coded), 2):
        shared = sorted(coded[a].keys() & coded[b].keys())
        if len(shared) < 2:
            continue
        x = np.array([coded[a][key] for key in shared])
        y = np.array([coded[b][key] for key in shared])
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            logger.debug(f"Annotators {a} and {b} give constant verdicts; pair skipped")
            continue
        correlations.append(float(pearsonr(x, y)[0]))
    if not correlations:
        raise RankingError("no two annotators share at least two non-constant verdicts")
    return float(np.mean(correlations))


def mean_absolute_scores(ratings: Sequence[Rating]) -> pd.DataFrame:
    """Mean Likert score per system and criterion, with GM over the three criteria when all are present."""
    if not ratings:
        raise RankingError("no ratings to aggregate")
    frame = pd.DataFrame([rating.model_dump() for rating in ratings])
    table = frame.pivot_table(index="system", columns="criterion", values="score", aggfunc="mean")
    if all(criterion in table.columns for criterion in ABSOLUTE_CRITERIA):
        table["GM"] = [gm3(*(row[c] for c in ABSOLUTE_CRITERIA)) for _, row in table.iterrows()]
    table.columns.name = None
    return table


# ---------------------------------------------------------------- simulation


def simulate_judgments(
    rewrite_set: RewriteSet,
    plan: ComparisonPlan,
    latent: Mapping[str, float],
    annotators: int,
    noise: float,
    rng: np.random.Generator,
) -> List[Judgment]:
    """Each annotator prefers the higher latent score, flipping the verdict with probability ``noise``."""
    judgments = []
    for annotator in range(annotators):
        for left, right in plan.id_pairs(rewrite_set):
            better, worse = (left, right) if latent[left] >= latent[right] else (right, left)
            winner = worse if rng.random() < noise else better
            judgments.append(
                Judgment(
                    set_id=rewrite_set.set_id,
                    left_id=left,
                    right_id=right,
                    annotator_id=f"a{annotator + 1}",
                    winner_id=winner,
                )
            )
    return judgments


def run_prestudy(
    sets: int = 45,
    k: int = 6,
    annotators: int = 5,
    noise: float = 0.2,
    lambdas: Sequence[int] = (2, 3, 4),
    seed: int = 0,
    prior: float = DEFAULT_PRIOR,
) -> pd.DataFrame:
    """Compare sparse S-window plans against the full plan on simulated annotations."""
    rng = np.random.default_rng(seed)
    problems = []
    for s in range(sets):
        rewrite_set = RewriteSet(set_id=f"set{s + 1}", rewrite_ids=[f"r{i + 1}" for i in range(k)])
        latent = dict(zip(rewrite_set.rewrite_ids, rng.normal(size=k)))
        full = simulate_judgments(rewrite_set, full_plan(k), latent, annotators, noise, rng)
        problems.append((rewrite_set, latent, full))

    baselines = [bt_aggregate(full, rewrite_set, prior) for rewrite_set, _, full in problems]
    total = sum(len(full) for _, _, full in problems)
    rows = []
    for lambda_ in lambdas:
        plan = s_window_plan(k, lambda_)
        planned = set(plan.pairs)
        for count in range(1, annotators + 1):
            keep = {f"a{a + 1}" for a in range(count)}
            metrics, judged = [], 0
            for (rewrite_set, _, full), baseline in zip(problems, baselines):
                position = {rewrite_id: i + 1 for i, rewrite_id in enumerate(rewrite_set.rewrite_ids)}
                subset = [
                    j
                    for j in full
                    if j.annotator_id in keep and tuple(sorted((position[j.left_id], position[j.right_id]))) in planned
                ]
                judged += len(subset)
                metrics.append(rank_metrics(bt_aggregate(subset, rewrite_set, prior), baseline))
            rhos = [m.pearson for m in metrics if m.pearson is not None]
            rows.append(
                {
                    "lambda": lambda_,
                    "annotators": count,
                    "#judgments": judged,
                    "%judgments": 100.0 * judged / total,
                    "rho": float(np.mean(rhos)) if rhos else float("nan"),
                    "NDCG@1": float(np.mean([m.ndcg_at_1 for m in metrics])),
                }
            )
    logger.info(f"Pre-study over {sets} sets: {total} full-plan judgments")
    return pd.DataFrame(rows)


# ---------------------------------------------------------------- files


def write_plan(plans: Sequence[Tuple[RewriteSet, ComparisonPlan]], path: Union[str, Path]) -> None:
    rows = [
        {"set_id": rewrite_set.set_id, "left_id": left, "right_id": right}
        for rewrite_set, plan in plans
        for left, right in plan.id_pairs(rewrite_set)
    ]
    pd.DataFrame(rows, columns=["set_id", "left_id", "right_id"]).to_csv(path, index=False)


def read_judgments(path: Union[str, Path]) -> List[Judgment]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [Judgment(**row) for row in frame.to_dict(orient="records")]


def write_judgments(judgments: Sequence[Judgment], path: Union[str, Path]) -> None:
    columns = ["set_id", "left_id", "right_id", "annotator_id", "winner_id"]
    pd.DataFrame([j.model_dump() for j in judgments], columns=columns).to_csv(path, index=False)


def read_ratings(path: Union[str, Path]) -> List[Rating]:
    frame = pd.read_csv(path, dtype={"set_id": str, "system": str, "annotator_id": str, "criterion": str})
    ratings = []
    for line, row in enumerate(frame.to_dict(orient="records"), start=2):
        try:
            ratings.append(Rating(**row))
        except ValidationError as exc:
            raise RankingError(f"{path}:{line}: invalid rating: {exc.errors()[0]['msg']}") from exc
    return ratings


def rewrite_sets_from_judgments(judgments: Sequence[Judgment]) -> List[RewriteSet]:
    """Rewrite sets in first-seen order, ids in first-seen order within each set."""
    members: Dict[str, Dict[str, None]] = {}
    for judgment in judgments:
        seen = members.setdefault(judgment.set_id, {})
        seen.setdefault(judgment.left_id)
        seen.setdefault(judgment.right_id)
    return [RewriteSet(set_id=set_id, rewrite_ids=list(ids)) for set_id, ids in members.items()]
