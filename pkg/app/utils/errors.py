from __future__ import annotations

from typing import Any, Dict, List, Optional


class RealignError(Exception):
    """Base class for every domain error raised by the toolkit."""


class ConfigError(RealignError):
    pass


class CorpusError(RealignError):
    pass


class ScorerError(RealignError):
    pass


class PolicyError(RealignError):
    pass


class RewardError(RealignError):
    pass


class PPOError(RealignError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RolloutError(PPOError):
    def __init__(self, record_id: str, cause: Exception) -> None:
        super().__init__(f"Rollout failed for argument {record_id}: {cause}", {"record_id": record_id})
        self.record_id = record_id


class MetricsError(RealignError):
    pass


class ExemplarError(RealignError):
    pass


class RankingError(RealignError):
    def __init__(self, message: str, components: Optional[List[List[str]]] = None) -> None:
        if components:
            message = f"{message}; components: {components}"
        super().__init__(message)
        self.components = components or []


class ArtifactMismatchError(RealignError):
    pass


class PipelineError(RealignError):
    def __init__(self, stage: str, cause: Exception, manifest: Any = None) -> None:
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.manifest = manifest
