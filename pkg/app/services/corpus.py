from __future__ import annotations

import logging
import math
import unicodedata
from typing import Callable, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from app.models.schemas import ArgumentRecord, Split, label_for
from app.utils.errors import CorpusError

logger = logging.getLogger(__name__)

MIN_WORDS = 10
MAX_WORDS = 220
MAX_CHARS = 1100

TRAIN_FRACTION = 0.7
VALIDATION_FRACTION = 0.1
TEST_FRACTION = 0.2


def passes_length_filter(record: ArgumentRecord) -> bool:
    return MIN_WORDS <= record.word_count <= MAX_WORDS and record.char_count <= MAX_CHARS


def filter_arguments(records: Sequence[ArgumentRecord]) -> List[ArgumentRecord]:
    """Keep arguments of 10-220 words and at most 1100 characters, in input order."""
    kept = [record for record in records if passes_length_filter(record)]
    logger.info(f"Length filter kept {len(kept)} of {len(records)} arguments")
    return kept


def normalize_topic(topic: str) -> str:
    return unicodedata.normalize("NFC", topic).casefold().strip()


def remove_topic_leakage(records: Sequence[ArgumentRecord], reserved_topics: Iterable[str]) -> List[ArgumentRecord]:
    reserved: Set[str] = {normalize_topic(topic) for topic in reserved_topics}
    if not reserved:
        return list(records)
    kept = [record for record in records if normalize_topic(record.issue) not in reserved]
    logger.info(f"Topic-leakage removal dropped {len(records) - len(kept)} arguments")
    return kept


def soft_label(records: Sequence[ArgumentRecord], classifier: Callable[[str], float]) -> List[ArgumentRecord]:
    """Attach ``app_score`` and the thresholded ``app_label`` from a deterministic scorer."""
    labeled = []
    for record in records:
        score = float(classifier(record.text))
        if math.isnan(score) or not 0.0 <= score <= 1.0:
            raise CorpusError(f"Classifier returned {score} for record {record.id}; expected a value in [0, 1]")
        payload = record.model_dump()
        payload.update(app_score=score, app_label=label_for(score))
        labeled.append(ArgumentRecord.model_validate(payload))
    return labeled


def label_from_scores(records: Sequence[ArgumentRecord]) -> List[ArgumentRecord]:
    """Threshold a stored ``app_score`` into ``app_label`` wherever the label is missing."""
    labeled = []
    for record in records:
        if record.app_label is None:
            if record.app_score is None:
                raise CorpusError(f"Record {record.id} carries neither app_score nor app_label")
            record = record.model_copy(update={"app_label": label_for(record.app_score)})
        labeled.append(record)
    return labeled


def _carve(
    indices: np.ndarray, size: int, labels: Optional[List[str]], seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``indices`` into (rest, carved) with ``len(carved) == size``."""
    if size <= 0:
        return indices, indices[:0]
    if size >= len(indices):
        return indices[:0], indices
    stratify = None
    if labels is not None:
        subset = [labels[i] for i in indices]
        if len(set(subset)) > 1:
            stratify = subset
    try:
        rest, carved = train_test_split(indices, test_size=size, random_state=seed, stratify=stratify)
    except ValueError:
        # too few members per class to stratify
        rest, carved = train_test_split(indices, test_size=size, random_state=seed, stratify=None)
    return np.asarray(rest), np.asarray(carved)


def split_dataset(records: Sequence[ArgumentRecord], seed: int) -> List[ArgumentRecord]:
    """Assign 70/10/20 train/validation/test tags, stratified by binary label when available."""
    if not records:
        raise CorpusError("Cannot split an empty corpus")
    n = len(records)
    n_test = round(n * TEST_FRACTION)
    n_validation = round(n * VALIDATION_FRACTION)

    labels = None
    if all(record.app_label is not None for record in records):
        labels = [record.app_label.value for record in records]

    indices = np.arange(n)
    rest, test = _carve(indices, n_test, labels, seed)
    train, validation = _carve(rest, n_validation, labels, seed)

    assignment = {}
    for split, members in ((Split.TRAIN, train), (Split.VALIDATION, validation), (Split.TEST, test)):
        for index in members:
            assignment[int(index)] = split
    logger.info(f"Split {n} arguments into {len(train)}/{len(validation)}/{len(test)}")
    return [record.model_copy(update={"split": assignment[i]}) for i, record in enumerate(records)]


def by_split(records: Sequence[ArgumentRecord], split: Split) -> List[ArgumentRecord]:
    return [record for record in records if record.split == split]
