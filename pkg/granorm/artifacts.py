"""Output directory layout and checked artifact persistence."""

from __future__ import annotations

import contextlib
import logging
import os
from typing import Any, Dict, Iterator, Optional

import numpy as np

from .config import stage_fingerprint
from .errors import ArtifactFormatError, MissingArtifactError, StaleArtifactError, UsageError
from .schema import SCHEMA_VERSION, validate_artifact
from .util import load_json, safe_json_dump

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"

# Artifact kind -> pipeline stage whose fingerprint it carries.
ARTIFACT_STAGES = {
    "model": "model",
    "attack": "attacks",
    "setup": "setups",
    "features": "features",
    "lid_reference": "features",
    "detector": "detectors",
    "evaluation": "evaluation",
}

PRODUCERS = {
    "model": "train",
    "attack": "attack",
    "setup": "build-setups",
    "features": "extract",
    "lid_reference": "extract --detector lid",
    "detector": "fit-detector",
    "evaluation": "evaluate",
}


class Workspace:
    """Paths below one run's output directory plus fingerprint-checked I/O."""

    def __init__(self, root: str, config: Dict[str, Any]) -> None:
        self.root = root
        self.config = config

    # ---------------------------------------------------------------- paths

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    @property
    def checkpoint(self) -> str:
        return self.path("model", "model.ckpt")

    @property
    def model_manifest(self) -> str:
        return self.path("model", "manifest.json")

    @property
    def architecture(self) -> str:
        return self.path("model", "architecture.json")

    def attack(self, kind: str, suffix: str = "json") -> str:
        return self.path("attacks", f"{kind}.{suffix}")

    def setup(self, cause: str, suffix: str = "json") -> str:
        return self.path("setups", f"{cause}.{suffix}")

    def features(self, detector: str, cause: str) -> str:
        return self.path("features", detector, f"{cause}.json")

    def detector(self, detector: str, cause: str) -> str:
        return self.path("detectors", detector, f"{cause}.json")

    def lid_reference(self, suffix: str = "json") -> str:
        return self.path("lid", f"reference.{suffix}")

    def roc(self, detector: str, cause: str) -> str:
        return self.path("roc", f"{detector}_{cause}.csv")

    @property
    def evaluation(self) -> str:
        return self.path("evaluation.json")

    @property
    def timings(self) -> str:
        return self.path("timings.json")

    # ------------------------------------------------------------------ I/O

    def fingerprint(self, kind: str) -> str:
        return stage_fingerprint(self.config, ARTIFACT_STAGES[kind])

    def write(self, kind: str, path: str, payload: Dict[str, Any]) -> None:
        doc = dict(payload)
        doc["schema_version"] = SCHEMA_VERSION
        doc["artifact"] = kind
        doc["fingerprint"] = self.fingerprint(kind)
        valid, errors = validate_artifact(doc, kind)
        if not valid:
            raise ArtifactFormatError(f"refusing to write invalid {kind} artifact {path}: " + "; ".join(errors))
        safe_json_dump(doc, path)
        logger.debug("wrote %s", path)

    def read(self, kind: str, path: str, *, model_checksum: Optional[str] = None) -> Dict[str, Any]:
        """Load and validate *path*; stale fingerprints or model checksums are refused."""

        if not os.path.exists(path):
            raise MissingArtifactError(path, f"run `{PRODUCERS[kind]}` first")
        try:
            doc = load_json(path)
        except ValueError as exc:
            raise ArtifactFormatError(f"{path}: invalid JSON ({exc})") from None
        valid, errors = validate_artifact(doc, kind)
        if not valid:
            raise ArtifactFormatError(f"{path}: " + "; ".join(errors))
        expected = self.fingerprint(kind)
        if doc["fingerprint"] != expected:
            raise StaleArtifactError(path, "fingerprint", expected, doc["fingerprint"])
        if model_checksum is not None and doc.get("model_checksum") != model_checksum:
            raise StaleArtifactError(path, "model_checksum", model_checksum, str(doc.get("model_checksum")))
        return doc

    @staticmethod
    def save_array(path: str, array: np.ndarray) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        np.save(path, np.asarray(array), allow_pickle=False)

    @staticmethod
    def load_array(path: str) -> np.ndarray:
        if not os.path.exists(path):
            raise MissingArtifactError(path)
        return np.load(path, allow_pickle=False)

    @staticmethod
    def write_text(path: str, text: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)

    # ----------------------------------------------------------------- lock

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        """Hold ``<root>/.lock`` exclusively for the duration of the block."""

        os.makedirs(self.root, exist_ok=True)
        lock_path = self.path(LOCK_NAME)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"{self.root} is locked by another granorm invocation; remove {lock_path} if that process is gone"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield
        finally:
            with contextlib.suppress(FileNotFoundError):
                os.remove(lock_path)
