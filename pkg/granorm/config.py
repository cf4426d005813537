"""Run configuration: defaults, JSON files, environment and flag overrides."""

from __future__ import annotations

import copy
import logging
import os
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError
from .schema import BASE_RUN_CONFIG, new_run_config, validate_run_config
from .util import canonical_json, load_json, sha256_text

logger = logging.getLogger(__name__)

ENV_DATA_ROOT = "GRANORM_DATA_ROOT"
ENV_LOG_LEVEL = "GRANORM_LOG_LEVEL"
ENV_DTYPE = "GRANORM_DTYPE"

# LID neighbourhood size per dataset
LID_K = {"mnist": 20, "cifar10": 20, "svhn": 30, "synthetic": 20}

DATASET_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mnist": {
        "architecture": "mnist_cnn",
        "paths": {"train_images": "train-images-idx3-ubyte", "test_images": "t10k-images-idx3-ubyte"},
    },
    "svhn": {
        "architecture": "svhn_cnn",
        "paths": {"train_images": "svhn-train-images-idx4-ubyte", "test_images": "svhn-test-images-idx4-ubyte"},
        "attacks": {"fgsm": {"epsilon": 0.03}, "bim_a": {"epsilon": 0.03, "alpha": 0.003},
                    "bim_b": {"epsilon": 0.03, "alpha": 0.003}},
    },
    "cifar10": {
        "architecture": "cifar_cnn",
        "paths": {"train_images": "cifar10-train-images-idx4-ubyte", "test_images": "cifar10-test-images-idx4-ubyte"},
        "attacks": {"fgsm": {"epsilon": 0.03}, "bim_a": {"epsilon": 0.03, "alpha": 0.003},
                    "bim_b": {"epsilon": 0.03, "alpha": 0.003}},
    },
    "synthetic": {
        "architecture": "toy_mlp",
        "training": {"epochs": 20, "learning_rate": 0.1, "batch_size": 32},
        "gran": {"sigma": 0.0},
        "lid": {"k": 10, "reference_count": 50},
        "setups": {"pretest_limit": None, "causes": ["fgsm", "bim_a", "bim_b", "jsma", "cw", "wrong"]},
    },
}


def merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively overlay *override* on a copy of *base*; ``None`` in a flag layer is kept."""

    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def set_path(doc: Dict[str, Any], dotted: str, value: Any) -> None:
    """Assign ``doc["a"]["b"] = value`` for ``dotted == "a.b"``."""

    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot set {dotted}: {part} is not a mapping")
    node[parts[-1]] = value


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    environ: Optional[Mapping[str, str]] = None,
) -> Dict[str, Any]:
    """Resolve defaults, then *path*, then dotted-key *overrides* into a validated config.

    The dataset is resolved first so its defaults sit underneath the file.
    """

    environ = os.environ if environ is None else environ
    overrides = dict(overrides or {})
    file_doc: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            file_doc = load_json(path)
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_doc, dict):
            raise ConfigError(f"{path}: a run configuration must be a JSON object")

    dataset = overrides.get("dataset") or file_doc.get("dataset") or BASE_RUN_CONFIG["dataset"]
    if dataset not in DATASET_DEFAULTS:
        raise ConfigError(f"Unknown dataset {dataset!r}; expected one of {', '.join(sorted(DATASET_DEFAULTS))}")

    doc = merge(new_run_config(), DATASET_DEFAULTS[dataset])
    doc["output_dir"] = os.path.join("runs", dataset)
    doc = merge(doc, file_doc)
    if "dtype" not in file_doc and environ.get(ENV_DTYPE):
        doc["dtype"] = environ[ENV_DTYPE]
    for dotted, value in overrides.items():
        if value is not None:
            set_path(doc, dotted, value)

    if doc["lid"].get("k") is None:
        doc["lid"]["k"] = LID_K[dataset]
    _resolve_paths(doc, environ.get(ENV_DATA_ROOT))

    if doc.get("seed") is None:
        raise ConfigError("A root seed is required; pass --seed or set `seed` in the config file")
    valid, errors = validate_run_config(doc)
    if not valid:
        raise ConfigError("Invalid run configuration: " + "; ".join(errors))
    if dataset != "synthetic":
        for key in ("train_images", "test_images"):
            if not os.path.exists(doc["paths"][key]):
                logger.warning("dataset file %s does not exist yet", doc["paths"][key])
    return doc


def _resolve_paths(doc: Dict[str, Any], data_root: Optional[str]) -> None:
    if not data_root:
        return
    paths = doc["paths"]
    for key, value in list(paths.items()):
        if value and not os.path.isabs(value):
            paths[key] = os.path.join(data_root, value)


def log_level(debug: bool = False, environ: Optional[Mapping[str, str]] = None) -> int:
    if debug:
        return logging.DEBUG
    environ = os.environ if environ is None else environ
    name = environ.get(ENV_LOG_LEVEL, "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


# Config sections each stage depends on, cumulative along the pipeline.
STAGE_SECTIONS = {
    "model": ("schema_version", "dataset", "seed", "dtype", "paths", "synthetic", "architecture", "training"),
    "attacks": ("attacks", "setups"),
    "setups": ("setups",),
    "features": ("gran", "lid"),
    "detectors": ("detector",),
    "evaluation": ("evaluation",),
}
STAGE_ORDER = ("model", "attacks", "setups", "features", "detectors", "evaluation")


def stage_fingerprint(doc: Mapping[str, Any], stage: str) -> str:
    """Fingerprint of the config sections *stage* and every upstream stage read."""

    if stage not in STAGE_SECTIONS:
        raise ValueError(f"unknown stage {stage!r}")
    keys: list = []
    for name in STAGE_ORDER[: STAGE_ORDER.index(stage) + 1]:
        keys.extend(STAGE_SECTIONS[name])
    return sha256_text(canonical_json({key: doc.get(key) for key in sorted(set(keys))}))
