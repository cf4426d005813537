"""Built-in classifier architectures.

Feature length ``n`` (one GraN feature per parameter tensor):

========== ============================================ ===
name       layers                                       n
========== ============================================ ===
mnist_cnn  conv32-pool-conv64-pool-dense128-dense10     8
svhn_cnn   conv32-conv32-pool-conv64-conv64-pool-       12
           dense128-dense10
cifar_cnn  3 x (conv-conv-pool) + dense256-dense128-    18
           dense10
toy_mlp    dense16-dense2 on 1x2x1 inputs               4
========== ============================================ ===
"""

from __future__ import annotations

import copy
import os
from typing import Any, Dict

from .errors import ConfigError
from .schema import SCHEMA_VERSION, validate_architecture
from .util import load_json


def _conv(filters: int, kernel: int = 3, padding: int = 0) -> Dict[str, Any]:
    return {"kind": "conv2d", "filters": filters, "kernel": kernel, "stride": 1, "padding": padding}


_RELU = {"kind": "relu"}
_POOL = {"kind": "maxpool", "size": 2}


def _head(hidden: list, classes: int) -> list:
    layers: list = [{"kind": "flatten"}]
    for units in hidden:
        layers += [{"kind": "dense", "units": units}, _RELU]
    layers += [{"kind": "dense", "units": classes}, {"kind": "softmax"}]
    return layers


BUILTIN: Dict[str, Dict[str, Any]] = {
    "mnist_cnn": {
        "schema_version": SCHEMA_VERSION,
        "name": "mnist_cnn",
        "input_shape": [28, 28, 1],
        "classes": 10,
        "layers": [_conv(32), _RELU, _POOL, _conv(64), _RELU, _POOL] + _head([128], 10),
    },
    "svhn_cnn": {
        "schema_version": SCHEMA_VERSION,
        "name": "svhn_cnn",
        "input_shape": [32, 32, 3],
        "classes": 10,
        "layers": [_conv(32), _RELU, _conv(32), _RELU, _POOL, _conv(64), _RELU, _conv(64), _RELU, _POOL]
        + _head([128], 10),
    },
    "cifar_cnn": {
        "schema_version": SCHEMA_VERSION,
        "name": "cifar_cnn",
        "input_shape": [32, 32, 3],
        "classes": 10,
        "layers": [
            _conv(32, padding=1), _RELU, _conv(32, padding=1), _RELU, _POOL,
            _conv(64, padding=1), _RELU, _conv(64, padding=1), _RELU, _POOL,
            _conv(128, padding=1), _RELU, _conv(128, padding=1), _RELU, _POOL,
        ]
        + _head([256, 128], 10),
    },
    "toy_mlp": {
        "schema_version": SCHEMA_VERSION,
        "name": "toy_mlp",
        "input_shape": [1, 2, 1],
        "classes": 2,
        "layers": _head([16], 2),
    },
}

DATASET_ARCHITECTURES = {
    "mnist": "mnist_cnn",
    "svhn": "svhn_cnn",
    "cifar10": "cifar_cnn",
    "synthetic": "toy_mlp",
}


def new_architecture(name: str) -> Dict[str, Any]:
    """Return a deep copy of the built-in architecture *name*."""

    try:
        return copy.deepcopy(BUILTIN[name])
    except KeyError:
        raise ConfigError(f"Unknown architecture {name!r}; built-ins are {', '.join(sorted(BUILTIN))}") from None


def load_architecture(source: str | Dict[str, Any]) -> Dict[str, Any]:
    """Resolve *source* (built-in name, JSON path or document) into a validated document."""

    if isinstance(source, dict):
        doc = copy.deepcopy(source)
    elif source in BUILTIN:
        doc = new_architecture(source)
    elif os.path.exists(source):
        doc = load_json(source)
    else:
        raise ConfigError(f"Architecture {source!r} is neither a built-in name nor an existing file")
    valid, errors = validate_architecture(doc)
    if not valid:
        raise ConfigError("Invalid architecture: " + "; ".join(errors))
    return doc
