from __future__ import annotations

import logging
import math
import threading
from typing import Dict, Optional, Sequence

import numpy as np

from app.models.schemas import RewardConfig, Trajectory
from app.services.scorers import AppropriatenessScorer, SimilarityScorer, TokenF1Similarity, resolve_scorer
from app.utils.errors import RewardError

logger = logging.getLogger(__name__)

# appropriateness weight -> system name of the trained policy
SWEEP_NAMES: Dict[float, str] = {
    1.0: "PPO_app",
    0.6: "PPO_app>sim",
    0.5: "PPO_app=sim",
    0.4: "PPO_app<sim",
}


def system_name(app_weight: float) -> str:
    for weight, name in SWEEP_NAMES.items():
        if math.isclose(weight, app_weight, abs_tol=1e-9):
            return name
    return f"PPO_app={app_weight:g}"


def _scorers(
    config: RewardConfig,
    app_scorer: Optional[AppropriatenessScorer],
    sim_scorer: Optional[SimilarityScorer],
):
    if app_scorer is None:
        if config.app_scorer is None:
            raise RewardError("no appropriateness scorer configured")
        app_scorer = resolve_scorer(config.app_scorer)
    if sim_scorer is None:
        sim_scorer = resolve_scorer(config.sim_scorer) if config.sim_scorer is not None else TokenF1Similarity()
    return app_scorer, sim_scorer


def property_reward(
    x: Sequence[str],
    y: Sequence[str],
    config: RewardConfig,
    app_scorer: Optional[AppropriatenessScorer] = None,
    sim_scorer: Optional[SimilarityScorer] = None,
) -> float:
    """alpha_sim * c_sim(x, y) + (1 - alpha_sim) * c_app(y)."""
    app_scorer, sim_scorer = _scorers(config, app_scorer, sim_scorer)
    c_sim = float(sim_scorer(x, y))
    c_app = float(app_scorer.score(y))
    return config.alpha_sim * c_sim + (1.0 - config.alpha_sim) * c_app


class RunningMoments:
    """Welford running mean/variance; scales rewards by the running standard deviation."""

    def __init__(self, epsilon: float = 1e-8) -> None:
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.epsilon = epsilon
        self._lock = threading.Lock()

    def update(self, value: float) -> None:
        with self._lock:
            self.count += 1
            delta = value - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (value - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / (self.count - 1)) if self.count > 1 else 1.0

    def normalize(self, value: float) -> float:
        self.update(value)
        return value / (self.std + self.epsilon)


def kl_penalized_rewards(
    trajectory: Trajectory,
    config: RewardConfig,
    score: Optional[float] = None,
    normalizer: Optional[RunningMoments] = None,
    app_scorer: Optional[AppropriatenessScorer] = None,
    sim_scorer: Optional[SimilarityScorer] = None,
) -> np.ndarray:
    """Per-token rewards: -beta * log-ratio on every token, property reward added on the last."""
    logprobs = np.asarray(trajectory.logprobs, dtype=np.float64)
    ref_logprobs = np.asarray(trajectory.ref_logprobs, dtype=np.float64)
    if logprobs.shape != ref_logprobs.shape:
        raise RewardError(f"log-prob vectors differ in shape: {logprobs.shape} vs {ref_logprobs.shape}")
    if logprobs.size == 0:
        raise RewardError(f"trajectory {trajectory.record_id} has an empty response")
    if score is None:
        score = property_reward(trajectory.argument, trajectory.rewrite, config, app_scorer, sim_scorer)
    if config.normalize and normalizer is not None:
        score = normalizer.normalize(score)
    rewards = -config.beta * (logprobs - ref_logprobs)
    rewards[-1] += score
    return rewards
