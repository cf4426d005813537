"""Shared builders for the test-suite."""

import functools
import pathlib

import numpy as np

from granorm.data import make_two_gaussians
from granorm.nn import Model, TrainConfig, train

DATA_DIR = pathlib.Path(__file__).parent / "data"


def dense_architecture(height, width, classes, hidden=()):
    layers = [{"kind": "flatten"}]
    for units in hidden:
        layers += [{"kind": "dense", "units": units}, {"kind": "relu"}]
    layers += [{"kind": "dense", "units": classes}, {"kind": "softmax"}]
    return {"name": "test_dense", "input_shape": [height, width, 1], "classes": classes, "layers": layers}


def linear_model(weight, bias=None):
    """Single dense layer on ``1 x d x 1`` inputs with the given ``(d, classes)`` weight."""

    weight = np.asarray(weight, dtype=np.float64)
    model = Model.from_architecture(dense_architecture(1, weight.shape[0], weight.shape[1]), seed=0)
    model.load_state(
        {
            "dense_0.weight": weight,
            "dense_0.bias": np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64),
        }
    )
    return model


@functools.lru_cache(maxsize=None)
def toy_data(seed=7, boundary_fraction=0.1):
    return make_two_gaussians(1000, 400, seed, boundary_fraction=boundary_fraction)


@functools.lru_cache(maxsize=None)
def trained_toy_model(seed=7):
    """``toy_mlp`` trained on the two-Gaussian data; callers must not mutate it."""

    train_set, _ = toy_data(seed)
    model = Model.from_architecture("toy_mlp", seed=seed)
    train(model, train_set.images, train_set.labels, TrainConfig(epochs=20, learning_rate=0.1, batch_size=32, seed=seed))
    return model
