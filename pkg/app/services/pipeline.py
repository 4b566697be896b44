from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from app.models.schemas import (
    AppLabel,
    ArgumentRecord,
    ClassifierTrainingConfig,
    EvaluationRow,
    ExperimentConfig,
    GenerationConfig,
    PolicyArchitecture,
    PromptMode,
    RewardConfig,
    RewriteSet,
    RunManifest,
    Source,
    Split,
    StageRecord,
)
from app.services import corpus as corpus_ops
from app.services.artifacts import ArtifactStore, read_records
from app.services.exemplar import HashedEmbedder, cosine_matrix, pagerank_centrality
from app.services.metrics import evaluate_system, write_report
from app.services.policy import (
    EOS_ID,
    PolicyCheckpoint,
    PolicyModel,
    Vocabulary,
    encode_prompt,
    generate_rewrite,
    pretrain_mle,
    template_tokens,
)
from app.services.ppo import LOG_COLUMNS, PPOTrainer
from app.services.ranking import bt_aggregate, rank_distribution, s_window_plan, simulate_judgments
from app.services.reward import system_name
from app.services.scorers import (
    AppropriatenessModel,
    NGramLM,
    TokenF1Similarity,
    fit_appropriateness_classifier,
    load_lexicon,
)
from app.utils.errors import CorpusError, PipelineError
from app.utils.hashing import derive_seed, file_digest, state_digest
from config.settings import settings

logger = logging.getLogger(__name__)

STAGES = ("corpus", "scorers", "pretrain", "ppo", "evaluate")
EXACT_COPY = "Exact Copy"
REFERENCE_REWRITE = "Reference Rewrite"

SYLLABLES = (
    "ba", "be", "bo", "da", "de", "di", "fa", "fo", "ga", "ka", "ke", "ko",
    "la", "li", "lo", "ma", "me", "mi", "na", "ne", "no", "pa", "pe", "po",
    "ra", "re", "ri", "sa", "se", "so", "ta", "te", "to", "va", "vi",
)
BANNED_WORDS = (
    "idiotic", "stupid", "moronic", "pathetic", "ridiculous", "absurd", "clueless", "garbage",
    "dumb", "lame", "nonsense", "awful", "disgusting", "hateful", "ignorant", "laughable",
    "worthless", "trash", "foolish", "crazy", "insane", "shameful", "lousy", "rubbish",
)
COUNTERPARTS = (
    "questionable", "unconvincing", "debatable", "weak", "surprising", "unusual", "uninformed", "flawed",
    "simplistic", "limited", "unfounded", "poor", "unpleasant", "harsh", "unaware", "odd",
    "minor", "wasteful", "unwise", "unexpected", "extreme", "regrettable", "mediocre", "inadequate",
)
TOPICS = (
    "school uniforms", "nuclear energy", "public transport", "animal testing",
    "remote work", "space funding", "minimum wage", "social media",
)
NEUTRAL_VOCABULARY_SIZE = 120
INAPPROPRIATE_SHARE = 0.6
PRETRAIN_REPLACE_PROBABILITY = 0.3


@dataclass
class SyntheticTask:
    """Desk-scale stand-in corpus with a known appropriateness rule and its fitted scorers."""

    records: List[ArgumentRecord]
    banned: List[str]
    replacements: Dict[str, str]
    classifier: AppropriatenessModel
    similarity: TokenF1Similarity
    language_model: NGramLM
    pretrain_targets: Dict[str, str]
    reference_rewrites: Dict[str, str]


def _replace_banned(tokens: Sequence[str], replacements: Dict[str, str], rng: np.random.Generator, p: float) -> str:
    return " ".join(
        replacements[token] if token in replacements and (p >= 1.0 or rng.random() < p) else token for token in tokens
    )


def make_synthetic_task(
    seed: int, size: int = 1000, classifier_config: Optional[ClassifierTrainingConfig] = None
) -> SyntheticTask:
    """Arguments of 12-30 neutral words; inappropriate ones carry banned words at density 0.2-0.4."""
    if size < 100:
        raise CorpusError(f"synthetic corpus needs at least 100 arguments, got {size}")
    rng = np.random.default_rng(seed)
    words = [a + b for a in SYLLABLES for b in SYLLABLES]
    neutral = sorted(str(w) for w in rng.choice(words, size=NEUTRAL_VOCABULARY_SIZE, replace=False))
    replacements = dict(zip(BANNED_WORDS, COUNTERPARTS))

    n_inappropriate = int(round(size * INAPPROPRIATE_SHARE))
    flags = np.array([True] * n_inappropriate + [False] * (size - n_inappropriate))
    rng.shuffle(flags)

    records, truth = [], []
    for index, inappropriate in enumerate(flags):
        n_words = int(rng.integers(12, 31))
        body = [neutral[i] for i in rng.integers(len(neutral), size=n_words)]
        if inappropriate:
            density = rng.uniform(0.2, 0.4)
            for position in rng.choice(n_words, size=max(1, int(round(density * n_words))), replace=False):
                body[position] = BANNED_WORDS[int(rng.integers(len(BANNED_WORDS)))]
        sentence_length = int(rng.integers(5, 10))
        tokens = []
        for position, word in enumerate(body, start=1):
            tokens.append(word)
            if position % sentence_length == 0 or position == n_words:
                tokens.append(".")
        records.append(
            ArgumentRecord(
                id=f"syn-{index:05d}",
                text=" ".join(tokens),
                issue=TOPICS[int(rng.integers(len(TOPICS)))],
                source=list(Source)[int(rng.integers(len(Source)))],
            )
        )
        truth.append(AppLabel.INAPPROPRIATE if inappropriate else AppLabel.APPROPRIATE)

    classifier = fit_appropriateness_classifier(
        [(record.tokens, label) for record, label in zip(records, truth)],
        classifier_config or ClassifierTrainingConfig(),
        BANNED_WORDS,
    )
    labeled = corpus_ops.soft_label(records, classifier)
    pretrain_targets = {
        r.id: _replace_banned(r.tokens, replacements, rng, PRETRAIN_REPLACE_PROBABILITY) for r in labeled
    }
    reference = {r.id: _replace_banned(r.tokens, replacements, rng, 1.0) for r in labeled}
    language_model = NGramLM.fit([r.tokens for r in labeled])
    logger.info(f"Synthetic task: {size} arguments, {n_inappropriate} carry banned words")
    return SyntheticTask(
        records=labeled,
        banned=list(BANNED_WORDS),
        replacements=replacements,
        classifier=classifier,
        similarity=TokenF1Similarity(),
        language_model=language_model,
        pretrain_targets=pretrain_targets,
        reference_rewrites=reference,
    )


@dataclass
class PipelineState:
    """Values handed from one stage to the next."""

    records: List[ArgumentRecord] = field(default_factory=list)
    banned: List[str] = field(default_factory=list)
    pretrain_targets: Dict[str, str] = field(default_factory=dict)
    reference_rewrites: Dict[str, str] = field(default_factory=dict)
    classifier: Optional[AppropriatenessModel] = None
    language_model: Optional[NGramLM] = None
    vocabulary: Optional[Vocabulary] = None
    initial: Optional[PolicyCheckpoint] = None
    shots: List[Tuple[str, str]] = field(default_factory=list)
    policies: Dict[str, PolicyCheckpoint] = field(default_factory=dict)


def inappropriate(records: Sequence[ArgumentRecord], split: Split) -> List[ArgumentRecord]:
    return [r for r in corpus_ops.by_split(records, split) if r.app_label == AppLabel.INAPPROPRIATE]


def _slug(system: str) -> str:
    return system.replace(">", "gt").replace("<", "lt").replace("=", "eq")


def generate_rewrites(
    model: PolicyModel,
    vocabulary: Vocabulary,
    records: Sequence[ArgumentRecord],
    generation: GenerationConfig,
    mode: PromptMode,
    shots: Optional[Sequence[Tuple[str, str]]] = None,
) -> List[List[str]]:
    """One rewrite per record; record ``i`` samples with a seed derived from the generation seed and ``i``."""
    rewrites = []
    for index, record in enumerate(records):
        config = generation.model_copy(update={"seed": derive_seed(generation.seed, index)})
        rewrites.append(generate_rewrite(model, vocabulary, record.text, config, mode, shots).split())
    return rewrites


def central_shots(
    records: Sequence[ArgumentRecord], rewrites: Dict[str, str], count: int
) -> List[Tuple[str, str]]:
    """The ``count`` most central training arguments (PageRank over hashed embeddings) with their rewrites."""
    pool = [r for r in records if r.app_label == AppLabel.INAPPROPRIATE and r.id in rewrites]
    if len(pool) < 2:
        return [(r.text, rewrites[r.id]) for r in pool[:count]]
    embedder = HashedEmbedder()
    arguments = embedder.embed_arguments([r.id for r in pool], [r.text for r in pool], [{} for _ in pool])
    scores = pagerank_centrality(cosine_matrix(arguments))
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].id))
    return [(pool[i].text, rewrites[pool[i].id]) for i in order[:count]]


class Pipeline:
    """Sequential stages; each records its output digests in the run manifest."""

    def __init__(self, config: ExperimentConfig, output_directory: Optional[Union[str, Path]] = None) -> None:
        self.config = config
        self.config_hash = config.config_hash()
        self.store = ArtifactStore(output_directory or Path(settings.output_directory) / config.name, self.config_hash)
        self.state = PipelineState()
        self.seeds = {
            "run": config.seed,
            "pretrain": derive_seed(config.seed, 1),
            "generation": derive_seed(config.seed, 3),
        }
        for index, weight in enumerate(config.app_weights):
            self.seeds[f"ppo:{system_name(weight)}"] = derive_seed(config.seed, 2, index)
        self.manifest = RunManifest(config_hash=self.config_hash, seeds=self.seeds, tool_version=settings.version)

    @property
    def generation(self) -> GenerationConfig:
        return self.config.generation.model_copy(update={"seed": self.seeds["generation"]})

    def run(self) -> RunManifest:
        torch.set_num_threads(settings.torch_threads)
        stages: Dict[str, Callable[[], Dict[str, str]]] = {
            "corpus": self.stage_corpus,
            "scorers": self.stage_scorers,
            "pretrain": self.stage_pretrain,
            "ppo": self.stage_ppo,
            "evaluate": self.stage_evaluate,
        }
        for name in STAGES:
            started = time.perf_counter()
            logger.info(f"Stage {name} started")
            try:
                digests = stages[name]()
            except Exception as exc:
                self.store.save_json(self.manifest.model_dump(mode="json"), "manifest.json")
                raise PipelineError(name, exc, self.manifest) from exc
            elapsed = time.perf_counter() - started
            self.manifest.stages.append(StageRecord(name=name, digests=digests, wall_clock_seconds=elapsed))
            logger.info(f"Stage {name} finished in {elapsed:.1f}s")
        self.manifest.complete = True
        self.store.save_json(self.manifest.model_dump(mode="json"), "manifest.json")
        return self.manifest

    # ------------------------------------------------------------ stages

    def _load_external(self) -> None:
        source = self.config.corpus
        records = read_records(source.train_path)
        self.state.banned = load_lexicon(source.lexicon_path)
        self.state.records = records
        self.state.pretrain_targets = {r.id: r.text for r in records}

    def stage_corpus(self) -> Dict[str, str]:
        source = self.config.corpus
        if source.train_path is not None:
            self._load_external()
        else:
            task = make_synthetic_task(self.config.seed, source.synthetic_size, self.config.classifier)
            self.state.records = task.records
            self.state.banned = task.banned
            self.state.pretrain_targets = task.pretrain_targets
            self.state.reference_rewrites = task.reference_rewrites

        records = corpus_ops.filter_arguments(self.state.records)
        if source.reserved_topics_path is not None:
            reserved = Path(source.reserved_topics_path).read_text(encoding="utf-8").splitlines()
            records = corpus_ops.remove_topic_leakage(records, reserved)
        records = corpus_ops.label_from_scores(records)
        records = corpus_ops.split_dataset(records, self.config.seed)
        self.state.records = records
        self.manifest.fold_tags["corpus"] = "train/validation/test"
        return {"corpus.jsonl": self.store.save_records(records, "corpus.jsonl")}

    def stage_scorers(self) -> Dict[str, str]:
        self.state.records = self.store.load_records("corpus.jsonl")
        train = corpus_ops.by_split(self.state.records, Split.TRAIN)
        labeled = [(r.tokens, r.app_label) for r in train if r.app_label is not None]
        self.state.classifier = fit_appropriateness_classifier(labeled, self.config.classifier, self.state.banned)
        self.state.language_model = NGramLM.fit(
            [r.tokens for r in train], self.config.language_model.order, self.config.language_model.delta
        )
        self.manifest.fold_tags.update(classifier=Split.TRAIN.value, language_model=Split.TRAIN.value)
        classifier = self.state.classifier.descriptor()
        fluency = self.state.language_model.descriptor()
        self.store.save_descriptor(classifier, "classifier.json")
        self.store.save_descriptor(fluency, "language_model.json")
        return {"classifier.json": classifier.version, "language_model.json": fluency.version}

    def _pretrain_pairs(self, records: Sequence[ArgumentRecord]) -> List[Tuple[List[int], List[int]]]:
        vocabulary = self.state.vocabulary
        pairs = []
        for record in records:
            prompt = encode_prompt(vocabulary, record.text, self.config.prompt_mode, self._shots_for(self.config.prompt_mode))
            target = vocabulary.encode(self.state.pretrain_targets[record.id].split()) + [EOS_ID]
            pairs.append((prompt, target))
        return pairs

    def _shots_for(self, mode: PromptMode) -> Optional[List[Tuple[str, str]]]:
        return self.state.shots if mode == PromptMode.FEW_SHOT else None

    def stage_pretrain(self) -> Dict[str, str]:
        train = corpus_ops.by_split(self.state.records, Split.TRAIN)
        texts = [r.text for r in self.state.records] + list(self.state.pretrain_targets.values())
        texts += list(self.state.reference_rewrites.values())
        self.state.vocabulary = Vocabulary.build(texts, always=template_tokens())
        rewrites = self.state.reference_rewrites or self.state.pretrain_targets
        self.state.shots = central_shots(train, rewrites, self.config.evaluation.few_shot_count)

        architecture = PolicyArchitecture(
            vocab_size=len(self.state.vocabulary),
            d_model=self.config.d_model,
            n_layer=self.config.n_layer,
            n_head=self.config.n_head,
            context=self.config.context,
        )
        torch.manual_seed(self.seeds["pretrain"])
        model = PolicyModel(architecture)
        pretrain = self.config.pretrain.model_copy(update={"seed": self.seeds["pretrain"]})
        self.state.initial = pretrain_mle(model, self._pretrain_pairs(train), pretrain, self.state.vocabulary, self.config_hash)
        self.store.save_checkpoint(self.state.initial, "initial_policy.pt")
        return {"initial_policy.pt": state_digest(self.state.initial.state_dict)}

    def _evaluator(self, system: str) -> Callable[[PolicyModel, Sequence[ArgumentRecord]], EvaluationRow]:
        def evaluate(model: PolicyModel, records: Sequence[ArgumentRecord]) -> EvaluationRow:
            rewrites = generate_rewrites(
                model, self.state.vocabulary, records, self.generation, self.config.prompt_mode, self._shots_for(self.config.prompt_mode)
            )
            return evaluate_system(system, rewrites, [r.tokens for r in records], self.state.classifier, self.state.language_model)

        return evaluate

    def stage_ppo(self) -> Dict[str, str]:
        self.state.initial = self.store.load_checkpoint("initial_policy.pt")
        train = corpus_ops.by_split(self.state.records, Split.TRAIN)
        validation = inappropriate(self.state.records, Split.VALIDATION)
        self.manifest.fold_tags["checkpoint_selection"] = Split.VALIDATION.value
        digests = {}
        for weight in self.config.app_weights:
            name = system_name(weight)
            reward = RewardConfig.for_app_weight(
                weight,
                beta=self.config.beta,
                normalize=self.config.normalize_reward,
                app_scorer=self.state.classifier.descriptor(),
                sim_scorer=TokenF1Similarity().descriptor(),
            )
            ppo = self.config.ppo.model_copy(update={"seed": self.seeds[f"ppo:{name}"]})
            trainer = PPOTrainer(
                reward,
                ppo,
                self.generation,
                self._evaluator(name),
                self.config.prompt_mode,
                self._shots_for(self.config.prompt_mode),
                self.config_hash,
                app_scorer=self.state.classifier,
            )
            logger.info(f"Training {name} (appropriateness weight {weight:g})")
            best, log = trainer.train(self.state.initial, train, validation)
            self.state.policies[name] = best
            slug = _slug(name)
            self.store.save_checkpoint(best, f"policy_{slug}.pt")
            digests[f"policy_{slug}.pt"] = state_digest(best.state_dict)
            digests[f"ppo_log_{slug}.csv"] = self.store.save_frame(log.steps.reindex(columns=LOG_COLUMNS), f"ppo_log_{slug}.csv")
            self.store.save_frame(log.evaluations, f"checkpoints_{slug}.csv")
        return digests

    def _system_rewrites(self, test: Sequence[ArgumentRecord]) -> Dict[str, List[List[str]]]:
        vocabulary = self.state.vocabulary
        systems: Dict[str, List[List[str]]] = {EXACT_COPY: [r.tokens for r in test]}
        initial = self.state.initial.to_model()
        modes = list(PromptMode) if self.config.evaluation.compare_prompt_modes else [self.config.prompt_mode]
        for mode in modes:
            label = f"Initial + {mode.value}"
            systems[label] = generate_rewrites(initial, vocabulary, test, self.generation, mode, self._shots_for(mode))
        for name in self.state.policies:
            checkpoint = self.store.load_checkpoint(f"policy_{_slug(name)}.pt")
            systems[name] = generate_rewrites(
                checkpoint.to_model(), vocabulary, test, self.generation, self.config.prompt_mode, self._shots_for(self.config.prompt_mode)
            )
        if self.state.reference_rewrites:
            systems[REFERENCE_REWRITE] = [self.state.reference_rewrites[r.id].split() for r in test]
        return systems

    def _relative_study(self, test: Sequence[ArgumentRecord], systems: Dict[str, List[List[str]]]) -> pd.DataFrame:
        """Simulated judges compare every system's rewrite per argument; BT aggregates each set."""
        options = self.config.evaluation
        names = [name for name in systems if name != EXACT_COPY]
        rng = np.random.default_rng(derive_seed(self.config.seed, 4))
        plan = s_window_plan(len(names), min(options.s_window_lambda, max(1, len(names) - 1)))
        similarity = TokenF1Similarity()
        results, roster = [], {}
        for index, record in enumerate(test):
            ids = [f"{record.id}:{name}" for name in names]
            roster.update(zip(ids, names))
            latent = {
                rewrite_id: self.state.classifier.score(systems[name][index]) * similarity(record.tokens, systems[name][index])
                for rewrite_id, name in zip(ids, names)
            }
            rewrite_set = RewriteSet(set_id=record.id, rewrite_ids=ids)
            judgments = simulate_judgments(rewrite_set, plan, latent, options.judges, options.judge_noise, rng)
            results.append(bt_aggregate(judgments, rewrite_set, options.bt_prior))
        return rank_distribution(results, roster)

    def stage_evaluate(self) -> Dict[str, str]:
        test = inappropriate(self.state.records, Split.TEST)
        self.manifest.fold_tags["evaluation"] = Split.TEST.value
        systems = self._system_rewrites(test)
        originals = [r.tokens for r in test]
        rows = [
            evaluate_system(name, rewrites, originals, self.state.classifier, self.state.language_model)
            for name, rewrites in systems.items()
        ]
        report_path, text_path = write_report(rows, self.store.path("evaluation.tsv"))
        self.store.seal(report_path)
        self.store.seal(text_path)
        relative = self._relative_study(test, systems)
        digests = {
            "evaluation.tsv": file_digest(report_path),
            "relative.tsv": self.store.save_frame(relative, "relative.tsv", sep="\t"),
        }
        self.store.save_text(relative.to_string(index=False, float_format=lambda v: f"{v:.2f}") + "\n", "relative.txt")
        for row in rows:
            logger.info(f"{row.system}: app={row.app:.3f} sim={row.sim:.3f} nes={row.nes:.3f} ppl={row.ppl:.2f} gm={row.gm}")
        return digests


def run_pipeline(config: ExperimentConfig, output_directory: Optional[Union[str, Path]] = None) -> RunManifest:
    return Pipeline(config, output_directory).run()
