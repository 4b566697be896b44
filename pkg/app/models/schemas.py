from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator

from app.utils.hashing import content_hash

APPROPRIATENESS_THRESHOLD = 0.5


class Source(str, Enum):
    REVIEW = "review"
    DISCUSSION = "discussion"
    QA = "qa"


class AppLabel(str, Enum):
    APPROPRIATE = "appropriate"
    INAPPROPRIATE = "inappropriate"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class ScorerKind(str, Enum):
    APPROPRIATENESS = "appropriateness"
    SIMILARITY = "similarity"
    FLUENCY = "fluency"


class PromptMode(str, Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    INSTRUCTION = "instruction"


class PlanGenerator(str, Enum):
    S_WINDOW = "s_window"
    FULL = "full"
    EXTERNAL = "external"


def label_for(score: float) -> AppLabel:
    return AppLabel.INAPPROPRIATE if score < APPROPRIATENESS_THRESHOLD else AppLabel.APPROPRIATE


# ---------------------------------------------------------------- corpus


class ArgumentRecord(BaseModel):
    """One argument; counts are derived from ``text`` when omitted."""

    model_config = ConfigDict(frozen=True)

    id: str
    text: str
    issue: str
    source: Source
    word_count: int = Field(ge=0)
    char_count: int = Field(ge=0)
    app_score: Optional[float] = Field(None, ge=0.0, le=1.0)
    app_label: Optional[AppLabel] = None
    split: Optional[Split] = None

    @model_validator(mode="before")
    @classmethod
    def _derive_counts(cls, data: Any) -> Any:
        if isinstance(data, dict) and "text" in data:
            data = dict(data)
            data.setdefault("word_count", len(str(data["text"]).split()))
            data.setdefault("char_count", len(str(data["text"])))
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "ArgumentRecord":
        if self.word_count != len(self.text.split()):
            raise ValueError(f"word_count {self.word_count} does not match text of record {self.id}")
        if self.char_count != len(self.text):
            raise ValueError(f"char_count {self.char_count} does not match text of record {self.id}")
        if self.app_score is not None:
            expected = label_for(self.app_score)
            if self.app_label is not None and self.app_label != expected:
                raise ValueError(f"app_label {self.app_label.value} contradicts app_score {self.app_score}")
        return self

    @property
    def tokens(self) -> List[str]:
        return self.text.split()


# ---------------------------------------------------------------- scorers


class PropertyScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float = Field(ge=0.0, le=1.0)


class ScorerDescriptor(BaseModel):
    """Referenceable scorer; ``version`` is the content hash of ``parameters``."""

    kind: ScorerKind
    name: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    version: str = ""

    @model_validator(mode="after")
    def _stamp_version(self) -> "ScorerDescriptor":
        expected = content_hash({"kind": self.kind.value, "name": self.name, "parameters": self.parameters})
        if not self.version:
            self.version = expected
        elif self.version != expected:
            raise ValueError(f"descriptor version {self.version[:12]} does not match its parameters")
        return self


class ClassifierTrainingConfig(BaseModel):
    iterations: int = Field(5000, ge=0)
    learning_rate: float = Field(0.5, gt=0)
    l2: float = Field(1e-4, ge=0)
    initial_weights: Optional[List[float]] = None
    initial_bias: float = 0.0


class LanguageModelConfig(BaseModel):
    order: int = Field(3, ge=1)
    delta: float = Field(0.1, ge=0)


# ---------------------------------------------------------------- policy


class PolicyArchitecture(BaseModel):
    vocab_size: int = Field(ge=2, le=512)
    d_model: int = Field(64, ge=1)
    n_layer: int = Field(2, ge=0)
    n_head: int = Field(4, ge=1)
    context: int = Field(256, ge=2)
    dtype: str = "float64"

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "PolicyArchitecture":
        if self.d_model % self.n_head:
            raise ValueError("d_model must be divisible by n_head")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self


class AdapterConfig(BaseModel):
    rank: int = Field(8, ge=1)
    scale: float = Field(32.0, gt=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    target_modules: List[str] = Field(default_factory=lambda: ["attn.c_attn", "attn.c_proj"])


class GenerationConfig(BaseModel):
    top_p: float = Field(0.95, gt=0.0, le=1.0)
    temperature: float = Field(1.0, gt=0.0)
    max_new_tokens: int = Field(64, gt=0)
    seed: int = 0


class PretrainConfig(BaseModel):
    steps: int = Field(3000, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    holdout_fraction: float = Field(0.1, ge=0, lt=1)
    eval_every: int = Field(100, ge=1)
    seed: int = 0


# ---------------------------------------------------------------- reward


class RewardConfig(BaseModel):
    """``alpha_sim`` weights similarity, ``1 - alpha_sim`` appropriateness; ``beta`` scales the KL penalty."""

    model_config = ConfigDict(populate_by_name=True)

    alpha_sim: float = Field(0.5, ge=0.0, le=1.0, validation_alias=AliasChoices("alpha_sim", "alpha"))
    beta: float = Field(1.857e-3, ge=0.0)
    sim_scorer: Optional[ScorerDescriptor] = None
    app_scorer: Optional[ScorerDescriptor] = None
    normalize: bool = False

    @property
    def app_weight(self) -> float:
        return 1.0 - self.alpha_sim

    @classmethod
    def for_app_weight(cls, weight: float, **kwargs: Any) -> "RewardConfig":
        return cls(alpha_sim=1.0 - weight, **kwargs)


# ---------------------------------------------------------------- ppo


class PPOConfig(BaseModel):
    lr_start: float = Field(5e-6, gt=0)
    lr_end: float = Field(1.5e-6, gt=0)
    batch_size: int = Field(4, ge=1)
    total_steps: int = Field(2000, ge=0)
    clip_epsilon: float = 0.2
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    lam: float = Field(0.95, ge=0.0, le=1.0)
    epochs: int = Field(4, ge=1)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(1.0, gt=0)
    normalize_advantages: bool = True
    checkpoint_every: int = Field(100, ge=1)
    use_adapters: bool = True
    adapters: AdapterConfig = Field(default_factory=AdapterConfig)
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self) -> "PPOConfig":
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        return self


@dataclass
class Trajectory:
    """One rollout; every per-token vector has the response length."""

    record_id: str
    prompt_ids: List[int]
    response_ids: List[int]
    argument: List[str]
    rewrite: List[str]
    logprobs: np.ndarray
    ref_logprobs: np.ndarray
    values: np.ndarray
    rewards: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    score: Optional[float] = None

    def __post_init__(self) -> None:
        n = len(self.response_ids)
        for name in ("logprobs", "ref_logprobs", "values", "rewards", "advantages", "returns"):
            vector = getattr(self, name)
            if vector is None:
                continue
            vector = np.asarray(vector, dtype=np.float64)
            setattr(self, name, vector)
            if vector.shape != (n,):
                raise ValueError(f"{name} has shape {vector.shape}, expected ({n},)")

    @property
    def length(self) -> int:
        return len(self.response_ids)

    @property
    def log_ratio(self) -> float:
        return float(np.sum(self.logprobs - self.ref_logprobs))

    def with_(self, **changes: Any) -> "Trajectory":
        return replace(self, **changes)


class PPOStats(BaseModel):
    step: int
    lr: float
    mean_reward: float
    mean_score: float
    mean_kl: float
    clip_fraction: float
    value_loss: float
    policy_loss: float


# ---------------------------------------------------------------- metrics


class EvaluationRow(BaseModel):
    system: str
    app: float = Field(ge=0.0, le=1.0)
    sim: float = Field(ge=0.0, le=1.0)
    nes: float = Field(ge=0.0, le=1.0)
    ppl: float = Field(gt=0.0)
    gm: Optional[float] = None
    n: int = 0


# ---------------------------------------------------------------- exemplar


class EmbeddedArgument(BaseModel):
    id: str
    embedding: List[float]
    scores: Dict[str, float] = Field(default_factory=dict)

    @field_validator("embedding")
    @classmethod
    def _unit_norm(cls, value: List[float]) -> List[float]:
        norm = math.sqrt(sum(v * v for v in value))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"embedding must be unit-normalized, got norm {norm}")
        return value

    @field_validator("scores")
    @classmethod
    def _nonnegative(cls, value: Dict[str, float]) -> Dict[str, float]:
        if any(v < 0 for v in value.values()):
            raise ValueError("dimension scores must be nonnegative")
        return value


class RewriteCandidate(BaseModel):
    rewrite: str
    sim: float
    nes: float
    ppl: float
    app: float


# ---------------------------------------------------------------- ranking


class RewriteSet(BaseModel):
    set_id: str
    rewrite_ids: List[str]

    @field_validator("rewrite_ids")
    @classmethod
    def _unique(cls, value: List[str]) -> List[str]:
        if len(set(value)) != len(value):
            raise ValueError("rewrite ids must be unique within a set")
        return value

    @property
    def k(self) -> int:
        return len(self.rewrite_ids)


class ComparisonPlan(BaseModel):
    """Unordered 1-based index pairs into a rewrite set of size ``k``."""

    model_config = ConfigDict(populate_by_name=True)

    k: int = Field(ge=2)
    pairs: List[Tuple[int, int]]
    lambda_: Optional[int] = Field(None, alias="lambda")
    generator: PlanGenerator = PlanGenerator.FULL
    set_id: Optional[str] = None

    @model_validator(mode="after")
    def _check_pairs(self) -> "ComparisonPlan":
        seen = set()
        for i, j in self.pairs:
            if i == j:
                raise ValueError(f"self-pair ({i}, {j}) in plan")
            if not (1 <= i <= self.k and 1 <= j <= self.k):
                raise ValueError(f"pair ({i}, {j}) outside 1..{self.k}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate pair {key} in plan")
            seen.add(key)
        return self

    def id_pairs(self, rewrite_set: RewriteSet) -> List[Tuple[str, str]]:
        if rewrite_set.k != self.k:
            raise ValueError(f"plan for k={self.k} applied to a set of {rewrite_set.k} rewrites")
        ids = rewrite_set.rewrite_ids
        return [(ids[i - 1], ids[j - 1]) for i, j in self.pairs]


class Judgment(BaseModel):
    set_id: str
    left_id: str
    right_id: str
    annotator_id: str
    winner_id: str

    @model_validator(mode="after")
    def _winner_in_pair(self) -> "Judgment":
        if self.left_id == self.right_id:
            raise ValueError("a judgment cannot compare a rewrite with itself")
        if self.winner_id not in (self.left_id, self.right_id):
            raise ValueError(f"winner {self.winner_id} is not part of the pair")
        return self

    @property
    def pair(self) -> Tuple[str, str]:
        return (self.left_id, self.right_id) if self.left_id < self.right_id else (self.right_id, self.left_id)

    @property
    def loser_id(self) -> str:
        return self.right_id if self.winner_id == self.left_id else self.left_id


class BTResult(BaseModel):
    set_id: str
    scores: Dict[str, float]
    ranking: List[str]
    iterations: int = 0
    converged: bool = True
    max_relative_change: float = 0.0

    @model_validator(mode="after")
    def _normalized(self) -> "BTResult":
        if any(v <= 0 for v in self.scores.values()):
            raise ValueError("Bradley-Terry scores must be positive")
        if abs(sum(self.scores.values()) - 1.0) > 1e-9:
            raise ValueError("Bradley-Terry scores must sum to 1")
        return self

    def rank_of(self, rewrite_id: str) -> int:
        return self.ranking.index(rewrite_id) + 1


class RankMetrics(BaseModel):
    pearson: Optional[float] = None
    ndcg_at_1: float


class Rating(BaseModel):
    set_id: str
    system: str
    annotator_id: str
    criterion: str
    score: int = Field(ge=1, le=5)


# ---------------------------------------------------------------- pipeline


class CorpusSourceConfig(BaseModel):
    train_path: Optional[Path] = None
    lexicon_path: Optional[Path] = None
    reserved_topics_path: Optional[Path] = None
    synthetic_size: int = Field(1000, ge=100)

    @field_validator("train_path", "lexicon_path", "reserved_topics_path")
    @classmethod
    def _exists(cls, value: Optional[Path]) -> Optional[Path]:
        if value is not None and not Path(value).exists():
            raise ValueError(f"referenced file does not exist: {value}")
        return value

    @model_validator(mode="after")
    def _lexicon_with_corpus(self) -> "CorpusSourceConfig":
        if self.train_path is not None and self.lexicon_path is None:
            raise ValueError("an external corpus needs a lexicon_path for the appropriateness classifier")
        return self


class EvaluationOptions(BaseModel):
    judges: int = Field(5, ge=1)
    judge_noise: float = Field(0.1, ge=0.0, le=0.5)
    s_window_lambda: int = Field(4, ge=1)
    bt_prior: float = Field(0.1, ge=0.0)
    compare_prompt_modes: bool = True
    few_shot_count: int = Field(1, ge=1, le=9)


class ScorerPaths(BaseModel):
    """Descriptor files for staged runs; the pipeline fits its own scorers."""

    app_scorer: Optional[Path] = None
    fluency_scorer: Optional[Path] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    seed: int = 7
    corpus: CorpusSourceConfig = Field(default_factory=CorpusSourceConfig)
    classifier: ClassifierTrainingConfig = Field(default_factory=ClassifierTrainingConfig)
    language_model: LanguageModelConfig = Field(default_factory=LanguageModelConfig)
    d_model: int = 64
    n_layer: int = 2
    n_head: int = 4
    context: int = 256
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    app_weights: List[float] = Field(default_factory=lambda: [0.4, 0.5, 0.6, 1.0])
    beta: float = Field(1.857e-3, ge=0.0)
    normalize_reward: bool = False
    scorers: ScorerPaths = Field(default_factory=ScorerPaths)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    prompt_mode: PromptMode = PromptMode.INSTRUCTION
    evaluation: EvaluationOptions = Field(default_factory=EvaluationOptions)

    @field_validator("app_weights")
    @classmethod
    def _weights_in_range(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("the sweep needs at least one appropriateness weight")
        if any(not 0.0 <= w <= 1.0 for w in value):
            raise ValueError("appropriateness weights must lie in [0, 1]")
        return value

    def config_hash(self) -> str:
        return content_hash(self.model_dump(mode="json"))


class StageRecord(BaseModel):
    name: str
    digests: Dict[str, str] = Field(default_factory=dict)
    wall_clock_seconds: float = 0.0


class RunManifest(BaseModel):
    config_hash: str
    seeds: Dict[str, int] = Field(default_factory=dict)
    tool_version: str
    stages: List[StageRecord] = Field(default_factory=list)
    fold_tags: Dict[str, str] = Field(default_factory=dict)
    complete: bool = False

    def digests(self) -> Dict[str, Dict[str, str]]:
        return {stage.name: dict(stage.digests) for stage in self.stages}
