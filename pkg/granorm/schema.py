"""Document schemas for run configurations, architectures and artifacts."""

from __future__ import annotations

import copy
from typing import Any, Dict, List, Tuple

from .version import __version__

SCHEMA_VERSION = "0.1.0"

CAUSES = ("fgsm", "bim_a", "bim_b", "jsma", "cw", "wrong", "noisy")
ATTACK_KINDS = ("fgsm", "bim_a", "bim_b", "jsma", "cw")
DETECTORS = ("gran", "lid")
DATASETS = ("mnist", "svhn", "cifar10", "synthetic")
LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "softmax", "flatten")

BASE_RUN_CONFIG: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "dataset": "mnist",
    "seed": None,
    "dtype": "float64",
    "output_dir": "runs/mnist",
    "paths": {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": None,
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": None,
    },
    "synthetic": {
        "train_size": 2000,
        "test_size": 1000,
        "boundary_fraction": 0.1,
    },
    "architecture": "mnist_cnn",
    "training": {
        "epochs": 2,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "batch_size": 64,
        "train_limit": None,
    },
    "attacks": {
        "fgsm": {"epsilon": 0.3},
        "bim_a": {"epsilon": 0.3, "alpha": 0.03, "iterations": 10},
        "bim_b": {"epsilon": 0.3, "alpha": 0.03, "iterations": 10},
        "jsma": {"theta": 1.0, "gamma": 0.14, "pairs": True},
        "cw": {
            "confidence": 0.0,
            "binary_search_steps": 5,
            "max_iterations": 200,
            "learning_rate": 0.01,
            "initial_const": 0.01,
        },
    },
    "setups": {
        "causes": list(CAUSES),
        "pretest_limit": 1000,
        "attack_limits": {"jsma": 300, "cw": 300},
        "noise_clip": True,
    },
    "gran": {"sigma": 0.4},
    "lid": {"k": None, "reference_count": 100, "cache_activations": False},
    "detector": {"l2": 1e-4, "max_iterations": 10000, "tolerance": 1e-6},
    "evaluation": {"roc_points": False, "timing_samples": 200},
    "generator": {"tool": "granorm", "version": __version__},
}

RUN_CONFIG_REQUIRED = {
    "schema_version": str,
    "dataset": str,
    "seed": int,
    "dtype": str,
    "output_dir": str,
    "paths": dict,
    "architecture": (str, dict),
    "training": dict,
    "attacks": dict,
    "setups": dict,
    "gran": dict,
    "lid": dict,
    "detector": dict,
    "evaluation": dict,
}

ARCHITECTURE_REQUIRED = {
    "name": str,
    "input_shape": list,
    "classes": int,
    "layers": list,
}

ARTIFACT_REQUIRED: Dict[str, Dict[str, Any]] = {
    "attack": {"kind": str, "params": dict, "source_ids": list, "success": list, "model_checksum": str},
    "setup": {"cause": str, "samples": list, "model_checksum": str, "params": dict},
    "features": {
        "detector": str,
        "cause": str,
        "values": list,
        "labels": list,
        "sample_ids": list,
        "partition": list,
        "model_checksum": str,
    },
    "detector": {
        "detector": str,
        "cause": str,
        "weights": list,
        "bias": float,
        "mean": list,
        "std": list,
        "feature_length": int,
        "model_checksum": str,
    },
    "lid_reference": {"k": int, "reference_ids": list, "model_checksum": str, "cache_activations": bool},
    "evaluation": {"cells": list, "dataset": str},
    "model": {"architecture": dict, "model_checksum": str, "train_accuracy": float, "test_accuracy": float},
}

ARTIFACT_COMMON = {
    "schema_version": str,
    "fingerprint": str,
    "artifact": str,
}


def new_run_config() -> Dict[str, Any]:
    """Return a deep copy of :data:`BASE_RUN_CONFIG`."""

    return copy.deepcopy(BASE_RUN_CONFIG)


def _require_keys(data: Dict[str, Any], keys: Dict[str, Any], prefix: str, errors: List[str]) -> None:
    for key, expected in keys.items():
        if key not in data:
            errors.append(f"Missing key: {prefix}{key}")
            continue
        if expected is None:
            continue
        value = data[key]
        expected_types = expected if isinstance(expected, tuple) else (expected,)
        if float in expected_types and isinstance(value, int) and not isinstance(value, bool):
            continue
        if isinstance(value, bool) and bool not in expected_types:
            errors.append(f"Incorrect type for {prefix}{key}: expected {_type_names(expected_types)}, got bool")
            continue
        if not isinstance(value, expected_types):
            errors.append(
                f"Incorrect type for {prefix}{key}: expected {_type_names(expected_types)}, got {type(value).__name__}"
            )


def _type_names(types: Tuple[type, ...]) -> str:
    return " or ".join(t.__name__ for t in types)


def _check_version(doc: Dict[str, Any], errors: List[str]) -> None:
    version = doc.get("schema_version")
    if version and version != SCHEMA_VERSION:
        errors.append(f"Unsupported schema version: {version} (expected {SCHEMA_VERSION})")


def _positive(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0


def validate_run_config(doc: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """Validate a resolved run configuration returning ``(is_valid, errors)``."""

    errors: List[str] = []
    if not isinstance(doc, dict):
        return False, ["Run configuration must be a mapping"]
    _require_keys(doc, RUN_CONFIG_REQUIRED, "", errors)
    _check_version(doc, errors)

    if doc.get("dataset") not in DATASETS:
        errors.append(f"dataset must be one of {', '.join(DATASETS)}")
    if doc.get("dtype") not in ("float64", "float32"):
        errors.append("dtype must be float64 or float32")

    training = doc.get("training")
    if isinstance(training, dict):
        epochs = training.get("epochs")
        if not isinstance(epochs, int) or isinstance(epochs, bool) or epochs < 0:
            errors.append("training.epochs must be a non-negative integer")
        for key in ("learning_rate", "batch_size"):
            if not _positive(training.get(key)):
                errors.append(f"training.{key} must be positive")
        momentum = training.get("momentum")
        if not isinstance(momentum, (int, float)) or not 0 <= momentum < 1:
            errors.append("training.momentum must lie in [0, 1)")

    attacks = doc.get("attacks")
    if isinstance(attacks, dict):
        for kind, params in attacks.items():
            if kind not in ATTACK_KINDS:
                errors.append(f"attacks.{kind} is not a known attack")
                continue
            if not isinstance(params, dict):
                errors.append(f"attacks.{kind} must be a mapping")
                continue
            for key in ("epsilon", "alpha", "gamma", "theta", "learning_rate"):
                value = params.get(key)
                if value is not None and (not isinstance(value, (int, float)) or value < 0):
                    errors.append(f"attacks.{kind}.{key} must be >= 0")
            for key in ("iterations", "binary_search_steps", "max_iterations"):
                value = params.get(key)
                if value is not None and (not isinstance(value, int) or value < 1):
                    errors.append(f"attacks.{kind}.{key} must be an integer >= 1")

    setups = doc.get("setups")
    if isinstance(setups, dict):
        causes = setups.get("causes", [])
        if not isinstance(causes, list) or any(c not in CAUSES for c in causes):
            errors.append(f"setups.causes must list causes from {', '.join(CAUSES)}")

    gran = doc.get("gran")
    if isinstance(gran, dict):
        sigma = gran.get("sigma")
        if not isinstance(sigma, (int, float)) or sigma < 0:
            errors.append("gran.sigma must be >= 0")

    lid = doc.get("lid")
    if isinstance(lid, dict):
        count = lid.get("reference_count")
        k = lid.get("k")
        if not isinstance(count, int) or count < 2:
            errors.append("lid.reference_count must be an integer >= 2")
        elif k is not None and (not isinstance(k, int) or not 1 <= k < count):
            errors.append("lid.k must be an integer in [1, reference_count)")

    return len(errors) == 0, errors


def validate_architecture(doc: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """Validate an architecture document returning ``(is_valid, errors)``."""

    errors: List[str] = []
    if not isinstance(doc, dict):
        return False, ["Architecture must be a mapping"]
    _require_keys(doc, ARCHITECTURE_REQUIRED, "", errors)
    if errors:
        return False, errors

    shape = doc["input_shape"]
    if len(shape) != 3 or not all(isinstance(s, int) and s > 0 for s in shape):
        errors.append("input_shape must list three positive integers (height, width, channels)")
    if doc["classes"] < 2:
        errors.append("classes must be at least 2")

    layers = doc["layers"]
    if not layers:
        errors.append("layers must not be empty")
    for idx, layer in enumerate(layers):
        if not isinstance(layer, dict) or layer.get("kind") not in LAYER_KINDS:
            errors.append(f"layers[{idx}].kind must be one of {', '.join(LAYER_KINDS)}")
            continue
        kind = layer["kind"]
        if kind == "conv2d":
            for key in ("filters", "kernel"):
                if not isinstance(layer.get(key), int) or layer[key] < 1:
                    errors.append(f"layers[{idx}].{key} must be a positive integer")
            if layer.get("stride", 1) < 1 or layer.get("padding", 0) < 0:
                errors.append(f"layers[{idx}] has an invalid stride or padding")
        elif kind == "dense":
            if not isinstance(layer.get("units"), int) or layer["units"] < 1:
                errors.append(f"layers[{idx}].units must be a positive integer")
        elif kind == "maxpool":
            if not isinstance(layer.get("size", 2), int) or layer.get("size", 2) < 1:
                errors.append(f"layers[{idx}].size must be a positive integer")

    if layers and isinstance(layers[-1], dict):
        if layers[-1].get("kind") != "softmax":
            errors.append("the final layer must be softmax")
        elif len(layers) < 2 or layers[-2].get("kind") != "dense" or layers[-2].get("units") != doc["classes"]:
            errors.append("softmax must follow a dense layer with `classes` units")
    return len(errors) == 0, errors


def validate_artifact(doc: Dict[str, Any], kind: str) -> Tuple[bool, List[str]]:
    """Validate a persisted artifact of *kind* returning ``(is_valid, errors)``."""

    errors: List[str] = []
    if not isinstance(doc, dict):
        return False, ["Artifact must be a mapping"]
    if kind not in ARTIFACT_REQUIRED:
        return False, [f"Unknown artifact kind: {kind}"]
    _require_keys(doc, ARTIFACT_COMMON, "", errors)
    _require_keys(doc, ARTIFACT_REQUIRED[kind], "", errors)
    _check_version(doc, errors)
    if doc.get("artifact") not in (None, kind):
        errors.append(f"Expected a {kind} artifact, found {doc.get('artifact')}")
    return len(errors) == 0, errors
