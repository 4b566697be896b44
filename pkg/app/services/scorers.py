from __future__ import annotations

import logging
import math
import re
import threading
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from nltk.util import ngrams, pad_sequence
from scipy.special import expit

from app.models.schemas import (
    AppLabel,
    ClassifierTrainingConfig,
    PropertyScore,
    ScorerDescriptor,
    ScorerKind,
)
from app.utils.errors import ScorerError

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("banned_frequency", "uppercase_ratio", "repeated_punctuation_rate", "sentence_length_z")
SENTENCE_END = (".", "!", "?")
_REPEATED_PUNCT = re.compile(r"[!?]{2,}")
_STRIP = ".,!?;:\"'()"

# dimensions of inappropriateness, parent -> direct children
TAXONOMY: Dict[str, Tuple[str, ...]] = {
    "Inappropriateness": ("Toxic Emotions", "Missing Commitment", "Missing Intelligibility", "Other Reasons"),
    "Toxic Emotions": ("Excessive Intensity", "Emotional Deception"),
    "Missing Commitment": ("Missing Seriousness", "Missing Openness"),
    "Missing Intelligibility": ("Unclear Meaning", "Missing Relevance", "Confusing Reasoning"),
    "Other Reasons": ("Detrimental Orthography", "Reason Unclassified"),
}
DIMENSIONS: Tuple[str, ...] = tuple(
    dict.fromkeys([*TAXONOMY] + [child for children in TAXONOMY.values() for child in children])
)

LM_BOS = "<s>"
LM_EOS = "</s>"
LM_UNK = "<unk>"


def tokenize(text: str) -> List[str]:
    return text.split()


class AppropriatenessScorer(Protocol):
    def score(self, tokens: Sequence[str]) -> float: ...


class SimilarityScorer(Protocol):
    def __call__(self, x: Sequence[str], y: Sequence[str]) -> float: ...


def load_lexicon(path: Union[str, Path]) -> List[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return sorted({line.strip().casefold() for line in lines if line.strip()})


def save_lexicon(words: Iterable[str], path: Union[str, Path]) -> None:
    Path(path).write_text("\n".join(sorted(set(words))) + "\n", encoding="utf-8")


def mean_sentence_length(tokens: Sequence[str]) -> float:
    lengths, current = [], 0
    for token in tokens:
        current += 1
        if token.endswith(SENTENCE_END):
            lengths.append(current)
            current = 0
    if current:
        lengths.append(current)
    return float(np.mean(lengths)) if lengths else 0.0


class AppropriatenessModel:
    """Logistic model over four surface features; scores P(appropriate)."""

    name = "lexicon-logistic"

    def __init__(
        self,
        weights: Sequence[float],
        bias: float,
        banned: Iterable[str],
        length_mean: float = 0.0,
        length_std: float = 1.0,
    ) -> None:
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.shape != (len(FEATURE_NAMES),):
            raise ScorerError(f"expected {len(FEATURE_NAMES)} weights, got {self.weights.shape}")
        self.bias = float(bias)
        self.banned = frozenset(word.casefold() for word in banned)
        self.length_mean = float(length_mean)
        self.length_std = float(length_std) if length_std > 0 else 1.0

    def features(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros(len(FEATURE_NAMES))
        n = len(tokens)
        banned = sum(1 for token in tokens if token.casefold().strip(_STRIP) in self.banned)
        upper = sum(1 for token in tokens if token.isupper() and sum(ch.isalpha() for ch in token) >= 2)
        repeated = sum(1 for token in tokens if _REPEATED_PUNCT.search(token))
        z = (mean_sentence_length(tokens) - self.length_mean) / self.length_std
        return np.array([banned / n, upper / n, repeated / n, z], dtype=np.float64)

    def score(self, tokens: Sequence[str]) -> float:
        return float(expit(self.weights @ self.features(tokens) + self.bias))

    def __call__(self, text: str) -> float:
        return self.score(tokenize(text))

    def is_appropriate(self, tokens: Sequence[str]) -> bool:
        return self.score(tokens) >= 0.5

    def descriptor(self) -> ScorerDescriptor:
        return ScorerDescriptor(
            kind=ScorerKind.APPROPRIATENESS,
            name=self.name,
            parameters={
                "weights": [float(w) for w in self.weights],
                "bias": self.bias,
                "banned": sorted(self.banned),
                "length_mean": self.length_mean,
                "length_std": self.length_std,
            },
        )

    @classmethod
    def from_descriptor(cls, descriptor: ScorerDescriptor) -> "AppropriatenessModel":
        if descriptor.kind != ScorerKind.APPROPRIATENESS:
            raise ScorerError(f"descriptor {descriptor.name} is not an appropriateness scorer")
        return cls(**descriptor.parameters)


def appropriateness_score(text: Sequence[str], model: AppropriatenessModel) -> PropertyScore:
    return PropertyScore(value=model.score(text))


def _as_target(label: Union[AppLabel, int, bool]) -> int:
    if isinstance(label, AppLabel):
        return int(label == AppLabel.APPROPRIATE)
    return int(bool(label))


def fit_appropriateness_classifier(
    labeled: Sequence[Tuple[Sequence[str], Union[AppLabel, int, bool]]],
    config: ClassifierTrainingConfig,
    banned: Iterable[str],
) -> AppropriatenessModel:
    """Full-batch gradient descent on the L2-regularized logistic log-likelihood."""
    targets = np.array([_as_target(label) for _, label in labeled], dtype=np.float64)
    if len(np.unique(targets)) < 2:
        raise ScorerError("Classifier training needs at least one example of each class")

    lengths = np.array([mean_sentence_length(tokens) for tokens, _ in labeled])
    weights = np.zeros(len(FEATURE_NAMES)) if config.initial_weights is None else np.array(config.initial_weights, dtype=np.float64)
    model = AppropriatenessModel(weights, config.initial_bias, banned, lengths.mean(), lengths.std())
    features = np.stack([model.features(tokens) for tokens, _ in labeled])

    w, b = model.weights.copy(), model.bias
    n = len(targets)
    for _ in range(config.iterations):
        residual = expit(features @ w + b) - targets
        w -= config.learning_rate * (features.T @ residual / n + config.l2 * w)
        b -= config.learning_rate * float(residual.mean())

    fitted = AppropriatenessModel(w, b, banned, model.length_mean, model.length_std)
    accuracy = float(np.mean((expit(features @ w + b) >= 0.5) == targets.astype(bool)))
    logger.info(f"Fitted appropriateness classifier on {n} texts (training accuracy {accuracy:.3f})")
    return fitted


class TokenF1Similarity:
    """Multiset token overlap F1; the pluggable stand-in for an embedding similarity."""

    name = "token-f1"

    def __call__(self, x: Sequence[str], y: Sequence[str]) -> float:
        if not x and not y:
            return 1.0
        if not x or not y:
            return 0.0
        overlap = sum((Counter(x) & Counter(y)).values())
        return 2.0 * overlap / (len(x) + len(y))

    def descriptor(self) -> ScorerDescriptor:
        return ScorerDescriptor(kind=ScorerKind.SIMILARITY, name=self.name, parameters={})


def similarity_score(x: Sequence[str], y: Sequence[str]) -> PropertyScore:
    return PropertyScore(value=TokenF1Similarity()(x, y))


class NGramLM:
    """Additively smoothed n-gram model with an explicit end-of-sequence event."""

    name = "additive-ngram"

    def __init__(
        self,
        order: int,
        delta: float,
        vocabulary: Sequence[str],
        counts: Optional[Dict[Tuple[str, ...], Dict[str, int]]] = None,
    ) -> None:
        if order < 1:
            raise ScorerError("n-gram order must be at least 1")
        if delta < 0:
            raise ScorerError("smoothing constant must be nonnegative")
        if LM_EOS not in vocabulary:
            raise ScorerError(f"vocabulary must contain the end-of-sequence token {LM_EOS}")
        self.order = order
        self.delta = float(delta)
        self.vocabulary = list(dict.fromkeys(vocabulary))
        self._known = set(self.vocabulary)
        self.counts: Dict[Tuple[str, ...], Counter] = {}
        for context, nexts in (counts or {}).items():
            if any(c < 0 for c in nexts.values()):
                raise ScorerError("n-gram counts must be nonnegative")
            self.counts[tuple(context)] = Counter(nexts)
        self._totals = {context: sum(nexts.values()) for context, nexts in self.counts.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def _map(self, token: str) -> str:
        if token in self._known:
            return token
        if LM_UNK in self._known:
            return LM_UNK
        raise ScorerError(f"token {token!r} is outside the language-model vocabulary")

    def events(self, tokens: Sequence[str]) -> List[Tuple[str, ...]]:
        mapped = [self._map(token) for token in tokens]
        padded = list(pad_sequence(mapped, self.order, pad_left=True, left_pad_symbol=LM_BOS)) + [LM_EOS]
        return list(ngrams(padded, self.order))

    @classmethod
    def fit(cls, texts: Iterable[Sequence[str]], order: int = 3, delta: float = 0.1) -> "NGramLM":
        texts = [list(text) for text in texts]
        vocabulary = sorted({token for text in texts for token in text} - {LM_EOS, LM_UNK}) + [LM_EOS, LM_UNK]
        model = cls(order, delta, vocabulary)
        for text in texts:
            for event in model.events(text):
                model.counts.setdefault(event[:-1], Counter())[event[-1]] += 1
        model._totals = {context: sum(nexts.values()) for context, nexts in model.counts.items()}
        logger.info(f"Fitted order-{order} language model on {len(texts)} texts (V={model.vocab_size})")
        return model

    def prob(self, context: Tuple[str, ...], token: str) -> float:
        count = self.counts.get(context, {}).get(token, 0)
        denominator = self._totals.get(context, 0) + self.delta * self.vocab_size
        if denominator == 0:
            return 1.0 / self.vocab_size
        return (count + self.delta) / denominator

    def perplexity(self, tokens: Sequence[str], allow_empty: bool = False) -> float:
        if not tokens and not allow_empty:
            raise ScorerError("Perplexity is undefined for empty text")
        log_probs = []
        for event in self.events(tokens):
            p = self.prob(event[:-1], event[-1])
            if p <= 0.0:
                return math.inf
            log_probs.append(math.log(p))
        return math.exp(-sum(log_probs) / len(log_probs))

    def descriptor(self) -> ScorerDescriptor:
        counts = [[list(context), dict(sorted(nexts.items()))] for context, nexts in sorted(self.counts.items())]
        return ScorerDescriptor(
            kind=ScorerKind.FLUENCY,
            name=self.name,
            parameters={"order": self.order, "delta": self.delta, "vocabulary": self.vocabulary, "counts": counts},
        )

    @classmethod
    def from_descriptor(cls, descriptor: ScorerDescriptor) -> "NGramLM":
        if descriptor.kind != ScorerKind.FLUENCY:
            raise ScorerError(f"descriptor {descriptor.name} is not a fluency model")
        p = descriptor.parameters
        counts = {tuple(context): nexts for context, nexts in p.get("counts", [])}
        return cls(p["order"], p["delta"], p["vocabulary"], counts)


def perplexity(text: Sequence[str], lm: NGramLM) -> float:
    return lm.perplexity(text)


_resolved: Dict[str, object] = {}
_resolve_lock = threading.Lock()


def resolve_scorer(descriptor: ScorerDescriptor):
    """Instantiate (once per version) the scorer a descriptor refers to."""
    with _resolve_lock:
        scorer = _resolved.get(descriptor.version)
        if scorer is None:
            if descriptor.kind == ScorerKind.APPROPRIATENESS:
                scorer = AppropriatenessModel.from_descriptor(descriptor)
            elif descriptor.kind == ScorerKind.SIMILARITY:
                if descriptor.name != TokenF1Similarity.name:
                    raise ScorerError(f"unknown similarity scorer {descriptor.name}")
                scorer = TokenF1Similarity()
            else:
                scorer = NGramLM.from_descriptor(descriptor)
            _resolved[descriptor.version] = scorer
        return scorer
