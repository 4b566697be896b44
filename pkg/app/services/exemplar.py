from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.metrics.pairwise import cosine_similarity

from app.models.schemas import EmbeddedArgument, RewriteCandidate
from app.services.scorers import DIMENSIONS, TAXONOMY
from app.utils.errors import ExemplarError

logger = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.85
TIE_TOLERANCE = 1e-12


class HashedEmbedder:
    """Deterministic hashed bag-of-words embedding, l2-normalized."""

    def __init__(self, n_features: int = 1024) -> None:
        self.vectorizer = HashingVectorizer(
            n_features=n_features, alternate_sign=False, norm="l2", token_pattern=r"\S+", lowercase=True
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return self.vectorizer.transform(list(texts)).toarray()

    def embed_arguments(
        self, ids: Sequence[str], texts: Sequence[str], scores: Sequence[Mapping[str, float]]
    ) -> List[EmbeddedArgument]:
        vectors = self.embed(texts)
        arguments = []
        for argument_id, vector, score in zip(ids, vectors, scores):
            if not np.any(vector):
                raise ExemplarError(f"argument {argument_id} has no tokens to embed")
            arguments.append(EmbeddedArgument(id=argument_id, embedding=vector.tolist(), scores=dict(score)))
        return arguments


def load_embeddings(path: Union[str, Path]) -> List[EmbeddedArgument]:
    """JSON Lines with ``id``, ``embedding`` and ``scores`` per line."""
    with open(path, encoding="utf-8") as handle:
        return [EmbeddedArgument.model_validate(json.loads(line)) for line in handle if line.strip()]


def save_embeddings(arguments: Sequence[EmbeddedArgument], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for argument in arguments:
            handle.write(argument.model_dump_json() + "\n")


def candidate_pool(arguments: Sequence[EmbeddedArgument], dimension: str) -> List[EmbeddedArgument]:
    """Arguments with maximal mean score on ``dimension``; parents first need positive scores on every child."""
    if not arguments:
        raise ExemplarError("no arguments to select from")
    if dimension not in DIMENSIONS:
        raise ExemplarError(f"unknown dimension {dimension!r}")
    missing = [a.id for a in arguments if dimension not in a.scores]
    if missing:
        raise ExemplarError(f"arguments {missing[:5]} carry no score for {dimension!r}")

    children = TAXONOMY.get(dimension, ())
    eligible = [a for a in arguments if all(a.scores.get(child, 0.0) > 0.0 for child in children)]
    if not eligible:
        return []
    best = max(a.scores[dimension] for a in eligible)
    return [a for a in eligible if a.scores[dimension] == best]


def cosine_matrix(arguments: Sequence[EmbeddedArgument]) -> np.ndarray:
    if len(arguments) < 2:
        raise ExemplarError("cosine matrix needs at least two arguments")
    embeddings = np.array([a.embedding for a in arguments], dtype=np.float64)
    matrix = cosine_similarity(embeddings)
    matrix = (matrix + matrix.T) / 2.0
    np.fill_diagonal(matrix, 1.0)
    return matrix


def transition_matrix(matrix: np.ndarray) -> np.ndarray:
    """Column-normalized off-diagonal cosines, negatives clipped to 0."""
    weights = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, None)
    np.fill_diagonal(weights, 0.0)
    totals = weights.sum(axis=0)
    if np.any(totals <= 0.0):
        raise ExemplarError(f"columns {np.flatnonzero(totals <= 0.0).tolist()} have no positive similarity")
    return weights / totals


def pagerank_centrality(
    matrix: np.ndarray, damping: float = DEFAULT_DAMPING, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    """Power iteration of p = d * T p + (1 - d) / n from the uniform vector."""
    n = len(matrix)
    if n < 2:
        raise ExemplarError("centrality needs at least two arguments")
    if not 0.0 <= damping <= 1.0:
        raise ExemplarError(f"damping {damping} outside [0, 1]")
    transition = transition_matrix(matrix)
    scores = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        updated = damping * transition @ scores + (1.0 - damping) / n
        updated /= updated.sum()
        if np.abs(updated - scores).sum() < tol:
            return updated
        scores = updated
    raise ExemplarError(f"power iteration did not converge within {max_iter} iterations")


def select_exemplar(
    arguments: Sequence[EmbeddedArgument], dimension: str, damping: float = DEFAULT_DAMPING
) -> str:
    pool = candidate_pool(arguments, dimension)
    if not pool:
        raise ExemplarError(f"no candidate passes the child-dimension filter for {dimension!r}")
    if len(pool) == 1:
        return pool[0].id
    scores = pagerank_centrality(cosine_matrix(pool), damping)
    top = scores.max()
    return min(a.id for a, score in zip(pool, scores) if score >= top - TIE_TOLERANCE)


def select_all_exemplars(
    arguments: Sequence[EmbeddedArgument], damping: float = DEFAULT_DAMPING, dimensions: Optional[Sequence[str]] = None
) -> Dict[str, str]:
    chosen = {}
    for dimension in dimensions or DIMENSIONS:
        try:
            chosen[dimension] = select_exemplar(arguments, dimension, damping)
        except ExemplarError as exc:
            logger.warning(f"No exemplar for {dimension}: {exc}")
    return chosen


def rewrite_score(candidate: RewriteCandidate) -> Optional[float]:
    components = (candidate.sim, candidate.nes, candidate.ppl, candidate.app)
    if any(c <= 0 for c in components):
        return None
    return (candidate.sim * candidate.nes * candidate.app / candidate.ppl) ** 0.25


def select_best_rewrite(candidates: Sequence[RewriteCandidate]) -> RewriteCandidate:
    """Highest fourth-root GM of sim, nes, 1/ppl and app; first wins ties."""
    best, best_score = None, None
    for candidate in candidates:
        score = rewrite_score(candidate)
        if score is None:
            continue
        if best_score is None or score > best_score:
            best, best_score = candidate, score
    if best is None:
        raise ExemplarError("every candidate rewrite has a nonpositive component")
    return best
