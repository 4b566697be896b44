from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from nltk.metrics.distance import edit_distance

from app.models.schemas import EvaluationRow
from app.services.scorers import AppropriatenessModel, NGramLM, SimilarityScorer, TokenF1Similarity
from app.utils.errors import MetricsError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["System", "App.", "Sim.", "NES.", "PPL", "GM"]


def _check_aligned(originals: Sequence, rewrites: Sequence) -> None:
    if len(originals) != len(rewrites):
        raise MetricsError(f"{len(originals)} originals but {len(rewrites)} rewrites")
    if not originals:
        raise MetricsError("no instances to evaluate")


def flip_rate(
    originals: Sequence[Sequence[str]],
    rewrites: Sequence[Sequence[str]],
    classifier: AppropriatenessModel,
) -> float:
    """Share of rewrites judged appropriate among originals judged inappropriate."""
    _check_aligned(originals, rewrites)
    kept = [rewrite for original, rewrite in zip(originals, rewrites) if not classifier.is_appropriate(original)]
    if len(kept) < len(originals):
        logger.warning(f"Flip rate excludes {len(originals) - len(kept)} originals the classifier judges appropriate")
    if not kept:
        raise MetricsError("every original is judged appropriate; flip rate is undefined")
    return sum(1 for rewrite in kept if classifier.is_appropriate(rewrite)) / len(kept)


def nes(x: Sequence[str], y: Sequence[str]) -> float:
    """Normalized word-wise edit similarity, 1 - L(x, y) / max(|x|, |y|)."""
    longest = max(len(x), len(y))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(list(x), list(y)) / longest


def geometric_mean(app: float, sim: float, ppl: float) -> Optional[float]:
    """(app * sim / ppl) ** (1/3); None when any input is nonpositive."""
    if app <= 0 or sim <= 0 or ppl <= 0 or math.isinf(ppl):
        return None
    return (app * sim / ppl) ** (1.0 / 3.0)


def gm3(a: float, b: float, c: float) -> float:
    if a <= 0 or b <= 0 or c <= 0:
        raise MetricsError(f"geometric mean needs positive inputs, got ({a}, {b}, {c})")
    return (a * b * c) ** (1.0 / 3.0)


def evaluate_system(
    system: str,
    rewrites: Sequence[Sequence[str]],
    originals: Sequence[Sequence[str]],
    classifier: AppropriatenessModel,
    lm: NGramLM,
    similarity: Optional[SimilarityScorer] = None,
) -> EvaluationRow:
    """Corpus-level App., Sim., NES., PPL and the GM of the aggregates."""
    _check_aligned(originals, rewrites)
    similarity = similarity or TokenF1Similarity()
    app = flip_rate(originals, rewrites, classifier)
    sim = float(np.mean([similarity(x, y) for x, y in zip(originals, rewrites)]))
    edit = float(np.mean([nes(x, y) for x, y in zip(originals, rewrites)]))
    ppl = float(np.mean([lm.perplexity(y, allow_empty=True) for y in rewrites]))
    return EvaluationRow(system=system, app=app, sim=sim, nes=edit, ppl=ppl, gm=geometric_mean(app, sim, ppl), n=len(rewrites))


def report_frame(rows: Sequence[EvaluationRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "System": row.system,
                "App.": f"{row.app:.3f}",
                "Sim.": f"{row.sim:.3f}",
                "NES.": f"{row.nes:.3f}",
                "PPL": f"{row.ppl:.2f}",
                "GM": "-" if row.gm is None else f"{row.gm:.3f}",
            }
            for row in rows
        ],
        columns=REPORT_COLUMNS,
    )


def write_report(rows: Sequence[EvaluationRow], path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the TSV report and an aligned-text rendering next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = report_frame(rows)
    frame.to_csv(path, sep="\t", index=False)
    text_path = path.with_suffix(".txt")
    text_path.write_text(frame.to_string(index=False) + "\n", encoding="utf-8")
    return path, text_path


def read_pairs(path: Union[str, Path]) -> Tuple[List[List[str]], List[List[str]]]:
    """Read an ``original<TAB>rewrite`` TSV with a header row."""
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    missing = {"original", "rewrite"} - set(frame.columns)
    if missing:
        raise MetricsError(f"pairs file {path} lacks columns {sorted(missing)}")
    return [text.split() for text in frame["original"]], [text.split() for text in frame["rewrite"]]
