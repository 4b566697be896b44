from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from app.models.schemas import ArgumentRecord, ScorerDescriptor
from app.services.policy import PolicyCheckpoint
from app.utils.errors import ArtifactMismatchError
from app.utils.hashing import canonical_json, file_digest
from config.settings import settings

logger = logging.getLogger(__name__)

META_SUFFIX = ".meta.json"


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def read_records(path: Union[str, Path]) -> List[ArgumentRecord]:
    with open(path, encoding="utf-8") as handle:
        return [ArgumentRecord.model_validate_json(line) for line in handle if line.strip()]


def write_records(records: Sequence[ArgumentRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json(exclude_none=True) + "\n")


class ArtifactStore:
    """Run directory where every artifact carries a sidecar with its config hash and digest."""

    def __init__(self, root: Optional[Union[str, Path]] = None, config_hash: str = "") -> None:
        self.root = Path(root or settings.output_directory)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash

    def path(self, name: str) -> Path:
        return self.root / name

    def seal(self, path: Path) -> str:
        digest = file_digest(path)
        meta_path(path).write_text(
            canonical_json({"config_hash": self.config_hash, "sha256": digest}) + "\n", encoding="utf-8"
        )
        logger.info(f"Wrote {path.name} ({digest[:12]})")
        return digest

    def verify(self, name: str, expected_hash: Optional[str] = None) -> Path:
        """Reject an artifact written under another config or modified after writing."""
        path = self.path(name)
        sidecar = meta_path(path)
        if not path.exists() or not sidecar.exists():
            raise ArtifactMismatchError(f"artifact {name} or its metadata is missing in {self.root}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        expected = self.config_hash if expected_hash is None else expected_hash
        if expected and meta.get("config_hash") != expected:
            raise ArtifactMismatchError(
                f"artifact {name} was produced under config {meta.get('config_hash', '')[:12]}, expected {expected[:12]}"
            )
        if meta.get("sha256") != file_digest(path):
            raise ArtifactMismatchError(f"artifact {name} changed after it was written")
        return path

    def save_records(self, records: Sequence[ArgumentRecord], name: str) -> str:
        path = self.path(name)
        write_records(records, path)
        return self.seal(path)

    def load_records(self, name: str) -> List[ArgumentRecord]:
        return read_records(self.verify(name))

    def save_json(self, payload: Any, name: str) -> str:
        path = self.path(name)
        path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
        return self.seal(path)

    def load_json(self, name: str) -> Any:
        return json.loads(self.verify(name).read_text(encoding="utf-8"))

    def save_descriptor(self, descriptor: ScorerDescriptor, name: str) -> str:
        return self.save_json(descriptor.model_dump(mode="json"), name)

    def load_descriptor(self, name: str) -> ScorerDescriptor:
        return ScorerDescriptor.model_validate(self.load_json(name))

    def save_checkpoint(self, checkpoint: PolicyCheckpoint, name: str) -> str:
        if checkpoint.config_hash and self.config_hash and checkpoint.config_hash != self.config_hash:
            raise ArtifactMismatchError(f"checkpoint {name} belongs to config {checkpoint.config_hash[:12]}")
        path = self.path(name)
        checkpoint.save(path)
        return self.seal(path)

    def load_checkpoint(self, name: str) -> PolicyCheckpoint:
        checkpoint = PolicyCheckpoint.load(self.verify(name))
        if self.config_hash and checkpoint.config_hash != self.config_hash:
            raise ArtifactMismatchError(f"checkpoint {name} embeds config {checkpoint.config_hash[:12]}")
        return checkpoint

    def save_frame(self, frame: pd.DataFrame, name: str, sep: str = ",") -> str:
        path = self.path(name)
        frame.to_csv(path, sep=sep, index=False, float_format="%.10g")
        return self.seal(path)

    def save_text(self, text: str, name: str) -> str:
        path = self.path(name)
        path.write_text(text, encoding="utf-8")
        return self.seal(path)

    def digests(self, names: Sequence[str]) -> Dict[str, str]:
        return {name: file_digest(self.path(name)) for name in names}


def verified(path: Union[str, Path], config_hash: str = "", required: bool = True) -> Path:
    """Check a standalone artifact against its sidecar; unsealed external inputs pass when not required."""
    path = Path(path)
    if not required and not meta_path(path).exists():
        return path
    return ArtifactStore(path.parent, config_hash).verify(path.name)


def load_sealed_checkpoint(path: Union[str, Path], config_hash: str = "") -> PolicyCheckpoint:
    path = Path(path)
    return ArtifactStore(path.parent, config_hash).load_checkpoint(path.name)


def save_sealed_records(records: Sequence[ArgumentRecord], path: Union[str, Path]) -> str:
    path = Path(path)
    return ArtifactStore(path.parent).save_records(records, path.name)
