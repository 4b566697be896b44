from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import pandas as pd

from app.models.schemas import ScorerDescriptor
from app.services.artifacts import verified
from app.services.scorers import AppropriatenessModel, NGramLM
from app.utils.errors import ConfigError


def read_descriptor(path: Union[str, Path]) -> ScorerDescriptor:
    path = verified(path, required=False)
    return ScorerDescriptor.model_validate(json.loads(path.read_text(encoding="utf-8")))


def load_classifier(path: Union[str, Path]) -> AppropriatenessModel:
    return AppropriatenessModel.from_descriptor(read_descriptor(path))


def load_language_model(path: Union[str, Path]) -> NGramLM:
    return NGramLM.from_descriptor(read_descriptor(path))


def scorer_path(flag: Optional[str], configured: Optional[Path], option: str) -> Path:
    """Command-line path first, then the experiment file's reward block."""
    if flag:
        return Path(flag)
    if configured is not None:
        return Path(configured)
    raise ConfigError(f"pass {option} or set it in the experiment's reward block")


def show(frame: pd.DataFrame) -> None:
    print(frame.to_string(index=False))
