from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from app.models.schemas import (
    AppLabel,
    ArgumentRecord,
    EvaluationRow,
    GenerationConfig,
    PPOConfig,
    PPOStats,
    PromptMode,
    RewardConfig,
    Trajectory,
)
from app.services.policy import (
    PolicyCheckpoint,
    PolicyModel,
    Vocabulary,
    decode_response,
    encode_prompt,
    evaluation,
    response_logprobs_and_values,
    sample_response,
    sequence_logprob,
)
from app.services.reward import RunningMoments, kl_penalized_rewards, property_reward
from app.services.scorers import AppropriatenessScorer, SimilarityScorer
from app.utils.errors import PPOError, RolloutError
from app.utils.hashing import derive_seed
from config.settings import settings

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "mean_reward", "mean_kl", "clip_fraction", "value_loss"]
ADVANTAGE_EPS = 1e-8

Evaluator = Callable[[PolicyModel, Sequence[ArgumentRecord]], EvaluationRow]


def cosine_lr(step: int, config: PPOConfig) -> float:
    if not 0 <= step <= config.total_steps:
        raise PPOError(f"step {step} outside 0..{config.total_steps}")
    if config.total_steps == 0:
        return config.lr_start
    progress = math.pi * step / config.total_steps
    return config.lr_end + (config.lr_start - config.lr_end) * (1.0 + math.cos(progress)) / 2.0


def compute_gae(trajectory: Trajectory, gamma: float, lam: float) -> Trajectory:
    """Generalized advantage estimation by backward recursion; the value past the last token is 0."""
    if trajectory.rewards is None:
        raise PPOError(f"trajectory {trajectory.record_id} has no rewards")
    rewards, values = trajectory.rewards, trajectory.values
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(trajectory.length)):
        next_value = values[t + 1] if t + 1 < trajectory.length else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
    return trajectory.with_(advantages=advantages, returns=advantages + values)


# ---------------------------------------------------------------- rollouts


def _rollout(
    policy: PolicyModel,
    reference: PolicyModel,
    record: ArgumentRecord,
    vocabulary: Vocabulary,
    generation: GenerationConfig,
    mode: PromptMode,
    shots: Optional[Sequence[Tuple[str, str]]],
) -> Trajectory:
    prompt = encode_prompt(vocabulary, record.text, mode, shots)
    response = sample_response(policy, prompt, generation)
    with evaluation(policy):
        logprobs, values = response_logprobs_and_values(policy, prompt, response)
    ref_logprobs = sequence_logprob(reference, prompt, response)
    return Trajectory(
        record_id=record.id,
        prompt_ids=prompt,
        response_ids=response,
        argument=record.tokens,
        rewrite=decode_response(vocabulary, response),
        logprobs=logprobs.numpy(),
        ref_logprobs=ref_logprobs.numpy(),
        values=values.numpy(),
    )


def collect_rollouts(
    policy: PolicyModel,
    reference: PolicyModel,
    batch: Sequence[ArgumentRecord],
    reward_config: RewardConfig,
    generation: GenerationConfig,
    vocabulary: Vocabulary,
    mode: PromptMode = PromptMode.INSTRUCTION,
    shots: Optional[Sequence[Tuple[str, str]]] = None,
    step: int = 0,
    app_scorer: Optional[AppropriatenessScorer] = None,
    sim_scorer: Optional[SimilarityScorer] = None,
    normalizer: Optional[RunningMoments] = None,
) -> List[Trajectory]:
    """Sample one trajectory per argument on a frozen snapshot, then attach rewards in batch order."""
    snapshot = policy.snapshot()
    configs = [
        generation.model_copy(update={"seed": derive_seed(generation.seed, step, index)}) for index in range(len(batch))
    ]

    def work(index: int) -> Trajectory:
        record = batch[index]
        try:
            return _rollout(snapshot, reference, record, vocabulary, configs[index], mode, shots)
        except Exception as exc:
            raise RolloutError(record.id, exc) from exc

    with ThreadPoolExecutor(max_workers=max(1, settings.rollout_workers)) as executor:
        trajectories = list(executor.map(work, range(len(batch))))

    scored = []
    for trajectory in trajectories:
        score = property_reward(trajectory.argument, trajectory.rewrite, reward_config, app_scorer, sim_scorer)
        rewards = kl_penalized_rewards(trajectory, reward_config, score=score, normalizer=normalizer)
        scored.append(trajectory.with_(rewards=rewards, score=score))
    return scored


# ---------------------------------------------------------------- update


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Per-token min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)."""
    clipped = torch.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)
    return torch.minimum(ratio * advantages, clipped * advantages)


def batch_advantages(trajectories: Sequence[Trajectory], normalize: bool) -> List[np.ndarray]:
    if any(t.advantages is None for t in trajectories):
        raise PPOError("advantages must be computed before the update")
    if not normalize:
        return [t.advantages for t in trajectories]
    flat = np.concatenate([t.advantages for t in trajectories])
    mean, std = flat.mean(), flat.std()
    return [(t.advantages - mean) / (std + ADVANTAGE_EPS) for t in trajectories]


def ppo_loss(
    model: PolicyModel,
    trajectories: Sequence[Trajectory],
    advantages: Sequence[np.ndarray],
    epsilon: float,
    value_coef: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Token-averaged clipped policy loss plus ``value_coef`` times the squared value error."""
    policy_terms, value_terms, clipped = [], [], 0
    tokens = 0
    for trajectory, advantage in zip(trajectories, advantages):
        logprobs, values = response_logprobs_and_values(model, trajectory.prompt_ids, trajectory.response_ids)
        old = torch.as_tensor(trajectory.logprobs, dtype=logprobs.dtype)
        adv = torch.as_tensor(advantage, dtype=logprobs.dtype)
        returns = torch.as_tensor(trajectory.returns, dtype=values.dtype)
        ratio = torch.exp(logprobs - old)
        policy_terms.append(-clipped_surrogate(ratio, adv, epsilon).sum())
        value_terms.append(((values - returns) ** 2).sum())
        clipped += int((torch.abs(ratio.detach() - 1.0) > epsilon).sum())
        tokens += trajectory.length
    policy_loss = torch.stack(policy_terms).sum() / tokens
    value_loss = torch.stack(value_terms).sum() / tokens
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "clip_fraction": clipped / tokens,
    }
    return policy_loss + value_coef * value_loss, stats


def ppo_update(
    model: PolicyModel,
    optimizer: torch.optim.Optimizer,
    trajectories: Sequence[Trajectory],
    config: PPOConfig,
    lr: float,
    step: int = 0,
) -> PPOStats:
    """Run ``config.epochs`` clipped-surrogate steps on one batch with adapter dropout active; old log-probs come from eval-mode rollouts."""
    if not trajectories:
        raise PPOError("cannot update on an empty batch")
    for group in optimizer.param_groups:
        group["lr"] = lr
    advantages = batch_advantages(trajectories, config.normalize_advantages)
    was_training = model.training
    model.train()
    stats: Dict[str, float] = {}
    try:
        for epoch in range(config.epochs):
            loss, stats = ppo_loss(model, trajectories, advantages, config.clip_epsilon, config.value_coef)
            if not torch.isfinite(loss):
                diagnostics = {
                    "step": step,
                    "epoch": epoch,
                    "loss": float(loss.detach()),
                    "max_abs_advantage": float(max(np.abs(a).max() for a in advantages)),
                    "record_ids": [t.record_id for t in trajectories],
                    **stats,
                }
                logger.error(f"Non-finite PPO loss at step {step}, epoch {epoch}: {diagnostics}")
                raise PPOError("non-finite PPO loss", diagnostics)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), config.max_grad_norm)
            optimizer.step()
    finally:
        model.train(was_training)

    return PPOStats(
        step=step,
        lr=lr,
        mean_reward=float(np.mean([t.rewards.sum() for t in trajectories])),
        mean_score=float(np.mean([t.score if t.score is not None else 0.0 for t in trajectories])),
        mean_kl=float(np.mean([t.log_ratio for t in trajectories])),
        clip_fraction=stats["clip_fraction"],
        value_loss=stats["value_loss"],
        policy_loss=stats["policy_loss"],
    )


# ---------------------------------------------------------------- training loop


@dataclass
class TrainingLog:
    steps: pd.DataFrame
    evaluations: pd.DataFrame

    def save(self, directory: Union[str, Path]) -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        steps_path, evaluations_path = directory / "ppo_log.csv", directory / "checkpoint_evaluations.csv"
        self.steps[LOG_COLUMNS].to_csv(steps_path, index=False, float_format="%.10g")
        self.evaluations.to_csv(evaluations_path, index=False, float_format="%.10g")
        return steps_path, evaluations_path


def _selection_key(row: EvaluationRow) -> float:
    return row.gm if row.gm is not None else -math.inf


class PPOTrainer:
    """Alternates snapshot rollouts with exclusive updates; keeps the validation-GM-best checkpoint."""

    def __init__(
        self,
        reward_config: RewardConfig,
        ppo_config: PPOConfig,
        generation: GenerationConfig,
        evaluator: Evaluator,
        mode: PromptMode = PromptMode.INSTRUCTION,
        shots: Optional[Sequence[Tuple[str, str]]] = None,
        config_hash: str = "",
        app_scorer: Optional[AppropriatenessScorer] = None,
        sim_scorer: Optional[SimilarityScorer] = None,
    ) -> None:
        self.reward_config = reward_config
        self.config = ppo_config
        self.generation = generation
        self.evaluator = evaluator
        self.mode = mode
        self.shots = shots
        self.config_hash = config_hash
        self.app_scorer = app_scorer
        self.sim_scorer = sim_scorer

    def _prepare(self, initial: PolicyCheckpoint) -> Tuple[PolicyModel, PolicyModel]:
        reference = initial.to_model().snapshot()
        policy = initial.to_model()
        if self.config.use_adapters and initial.adapters is None:
            torch.manual_seed(derive_seed(self.config.seed, 0xADA))
            policy.add_adapters(self.config.adapters)
        return policy, reference

    def _evaluate(self, policy: PolicyModel, validation: Sequence[ArgumentRecord], step: int) -> EvaluationRow:
        row = self.evaluator(policy.snapshot(), validation)
        logger.info(f"Checkpoint {step}: app={row.app:.3f} sim={row.sim:.3f} ppl={row.ppl:.2f} gm={row.gm}")
        return row

    def train(
        self,
        initial: PolicyCheckpoint,
        corpus: Sequence[ArgumentRecord],
        validation: Sequence[ArgumentRecord],
    ) -> Tuple[PolicyCheckpoint, TrainingLog]:
        if not validation:
            raise PPOError("validation set is empty")
        pool = [record for record in corpus if record.app_label == AppLabel.INAPPROPRIATE]
        vocabulary = initial.vocab
        policy, reference = self._prepare(initial)

        best_row = self._evaluate(policy, validation, 0)
        best = PolicyCheckpoint.from_model(policy, vocabulary, 0, self.config_hash, best_row.model_dump(exclude={"system", "n"}))
        evaluations = [{"step": 0, **best_row.model_dump(exclude={"system"})}]
        if self.config.total_steps == 0:
            return initial, TrainingLog(pd.DataFrame(columns=LOG_COLUMNS), pd.DataFrame(evaluations))
        if not pool:
            raise PPOError("training corpus holds no inappropriate arguments")

        rng = np.random.default_rng(self.config.seed)
        optimizer = torch.optim.Adam(policy.trainable_parameters(), lr=self.config.lr_start)
        normalizer = RunningMoments() if self.reward_config.normalize else None
        rows: List[Dict[str, float]] = []
        progress = tqdm(range(1, self.config.total_steps + 1), desc="ppo", disable=not settings.progress)
        for step in progress:
            picks = rng.choice(len(pool), size=self.config.batch_size, replace=len(pool) < self.config.batch_size)
            batch = [pool[i] for i in picks]
            trajectories = collect_rollouts(
                policy,
                reference,
                batch,
                self.reward_config,
                self.generation.model_copy(update={"seed": derive_seed(self.config.seed, self.generation.seed)}),
                vocabulary,
                self.mode,
                self.shots,
                step,
                self.app_scorer,
                self.sim_scorer,
                normalizer,
            )
            trajectories = [compute_gae(t, self.config.gamma, self.config.lam) for t in trajectories]
            stats = ppo_update(policy, optimizer, trajectories, self.config, cosine_lr(step, self.config), step)
            rows.append(stats.model_dump())
            progress.set_postfix(reward=f"{stats.mean_reward:.3f}", kl=f"{stats.mean_kl:.3f}")

            if step % self.config.checkpoint_every == 0 or step == self.config.total_steps:
                row = self._evaluate(policy, validation, step)
                evaluations.append({"step": step, **row.model_dump(exclude={"system"})})
                if _selection_key(row) > _selection_key(best_row):
                    best_row = row
                    best = PolicyCheckpoint.from_model(
                        policy, vocabulary, step, self.config_hash, row.model_dump(exclude={"system", "n"})
                    )
        logger.info(f"PPO finished; selected checkpoint {best.step} with validation gm={best_row.gm}")
        return best, TrainingLog(pd.DataFrame(rows), pd.DataFrame(evaluations))


def train(
    initial: PolicyCheckpoint,
    corpus: Sequence[ArgumentRecord],
    reward_config: RewardConfig,
    ppo_config: PPOConfig,
    validation: Sequence[ArgumentRecord],
    generation: GenerationConfig,
    evaluator: Evaluator,
    **kwargs,
) -> Tuple[PolicyCheckpoint, TrainingLog]:
    trainer = PPOTrainer(reward_config, ppo_config, generation, evaluator, **kwargs)
    return trainer.train(initial, corpus, validation)
