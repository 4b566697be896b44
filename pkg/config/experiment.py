from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from pydantic import ValidationError

from app.models.schemas import ExperimentConfig
from app.utils.errors import ConfigError
from config.settings import settings

logger = logging.getLogger(__name__)

PATH_KEYS = ("train_path", "lexicon_path", "reserved_topics_path")
SCORER_KEYS = ("app_scorer", "fluency_scorer")

PRESETS: Dict[str, Dict[str, Any]] = {
    # desk-scale defaults; the PPO schedule is scaled x100 for the toy policy
    "paper-desk": {
        "name": "paper-desk",
        "seed": 7,
        "corpus": {"synthetic_size": 1000},
        "pretrain": {"steps": 3000, "batch_size": 16, "learning_rate": 1e-3, "eval_every": 100},
        "app_weights": [0.4, 0.5, 0.6, 1.0],
        "beta": 1.857e-3,
        "ppo": {"lr_start": 5e-4, "lr_end": 1.5e-4, "batch_size": 4, "total_steps": 2000, "checkpoint_every": 100},
        "generation": {"top_p": 0.95, "temperature": 1.0, "max_new_tokens": 64},
        "prompt_mode": "instruction",
        "evaluation": {"judges": 5, "judge_noise": 0.1, "s_window_lambda": 4, "bt_prior": 0.1},
    },
    "smoke": {
        "name": "smoke",
        "seed": 7,
        "corpus": {"synthetic_size": 200},
        "classifier": {"iterations": 500},
        "d_model": 16,
        "n_layer": 1,
        "n_head": 2,
        "pretrain": {"steps": 20, "batch_size": 8, "eval_every": 10},
        "app_weights": [1.0],
        "ppo": {"lr_start": 5e-4, "lr_end": 1.5e-4, "total_steps": 4, "checkpoint_every": 2, "epochs": 1},
        "generation": {"max_new_tokens": 40},
        "evaluation": {"judges": 3},
    },
}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _resolve_paths(data: Dict[str, Any], base: Path) -> None:
    corpus = data.get("corpus") or {}
    for key in PATH_KEYS:
        if corpus.get(key) is not None and not Path(corpus[key]).is_absolute():
            corpus[key] = str(base / corpus[key])
    scorers = data.get("scorers") or {}
    for key in SCORER_KEYS:
        if scorers.get(key) is not None and not Path(scorers[key]).is_absolute():
            scorers[key] = str(base / scorers[key])


def _fold_reward_block(data: Dict[str, Any]) -> None:
    """Accept a single ``reward: {alpha_sim|alpha, beta, normalize, app_scorer, fluency_scorer}`` block in place of the sweep keys."""
    reward = data.pop("reward", None)
    if reward is None:
        return
    alpha = reward.get("alpha_sim", reward.get("alpha"))
    if alpha is not None:
        data["app_weights"] = [1.0 - float(alpha)]
    if "beta" in reward:
        data["beta"] = reward["beta"]
    if "normalize" in reward:
        data["normalize_reward"] = reward["normalize"]
    for key in SCORER_KEYS:
        if key in reward:
            data.setdefault("scorers", {})[key] = reward[key]


def load_experiment(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Preset, then YAML file, then overrides; REALIGN_SEED and an explicit ``seed`` win last."""
    data: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _fold_reward_block(loaded)
        _resolve_paths(loaded, path.parent)
        data = _merge(data, loaded)
    if overrides:
        data = _merge(data, overrides)
    if settings.seed is not None:
        data["seed"] = settings.seed
    if seed is not None:
        data["seed"] = seed
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    logger.info(f"Loaded experiment {config.name} (seed {config.seed}, hash {config.config_hash()[:12]})")
    return config


def dump_experiment(config: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
