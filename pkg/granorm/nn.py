"""Layers, classifier models, training and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .architectures import load_architecture
from .autodiff import Tensor
from .errors import ArtifactFormatError, DivergenceError, MissingArtifactError, NumericalError, ShapeError
from .util import canonical_json

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GRNM"
CHECKPOINT_VERSION = 1
PARAMETRIC_KINDS = ("conv2d", "dense")


class Layer:
    kind = ""

    def __init__(self, name: str) -> None:
        self.name = name

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, options: Dict[str, Any], rng: np.random.Generator) -> None:
        super().__init__(name)
        kernel = options["kernel"]
        filters = options["filters"]
        self.stride = options.get("stride", 1)
        self.padding = options.get("padding", 0)
        limit = np.sqrt(6.0 / (kernel * kernel * in_channels))
        self.weight = Tensor(
            rng.uniform(-limit, limit, size=(kernel, kernel, in_channels, filters)),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = Tensor(np.zeros(filters), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def forward(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding), self.bias)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, options: Dict[str, Any], rng: np.random.Generator) -> None:
        super().__init__(name)
        units = options["units"]
        limit = np.sqrt(6.0 / in_features)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(in_features, units)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(units), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> List[Tuple[str, Tensor]]:
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def forward(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str, size: int, stride: Optional[int]) -> None:
        super().__init__(name)
        self.size = size
        self.stride = stride or size

    def forward(self, x: Tensor) -> Tensor:
        return ad.maxpool2d(x, size=self.size, stride=self.stride)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return ad.flatten(x)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x: Tensor) -> Tensor:
        return ad.softmax(x)


@dataclass
class ModelOutput:
    """Result of a forward pass: logits and the class probabilities ``F(x)``."""

    logits: Tensor
    probs: Tensor


class Model:
    """Ordered layers with named parameter tensors ``Θ``."""

    def __init__(self, architecture: Dict[str, Any], layers: List[Layer]) -> None:
        self.architecture = architecture
        self.layers = layers
        self.input_shape: Tuple[int, ...] = tuple(architecture["input_shape"])
        self.classes: int = architecture["classes"]

    @classmethod
    def from_architecture(cls, source: str | Dict[str, Any], seed: int) -> "Model":
        architecture = load_architecture(source)
        rng = np.random.default_rng(seed)
        layers: List[Layer] = []
        shape: Tuple[int, ...] = tuple(architecture["input_shape"])
        counts: Dict[str, int] = {}
        for entry in architecture["layers"]:
            kind = entry["kind"]
            index = counts.get(kind, 0)
            counts[kind] = index + 1
            name = f"{kind}_{index}"
            if kind == "conv2d":
                if len(shape) != 3:
                    raise ShapeError(f"{name}: conv2d needs an image input, got {shape}")
                layer: Layer = Conv2D(name, shape[2], entry, rng)
                k, s, p = entry["kernel"], entry.get("stride", 1), entry.get("padding", 0)
                shape = ((shape[0] + 2 * p - k) // s + 1, (shape[1] + 2 * p - k) // s + 1, entry["filters"])
            elif kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{name}: dense needs a flat input, got {shape}; add a flatten layer")
                layer = Dense(name, shape[0], entry, rng)
                shape = (entry["units"],)
            elif kind == "maxpool":
                size = entry.get("size", 2)
                stride = entry.get("stride") or size
                layer = MaxPool(name, size, stride)
                shape = ((shape[0] - size) // stride + 1, (shape[1] - size) // stride + 1, shape[2])
            elif kind == "flatten":
                layer = Flatten(name)
                shape = (int(np.prod(shape)),)
            elif kind == "relu":
                layer = ReLU(name)
            else:
                layer = Softmax(name)
            if any(dim < 1 for dim in shape):
                raise ShapeError(f"{name}: output shape {shape} is empty")
            layers.append(layer)
        return cls(architecture, layers)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        """Named parameter tensors in stable layer order (weights before biases)."""

        params: List[Tuple[str, Tensor]] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def parameter_names(self) -> List[str]:
        return [name for name, _ in self.parameters()]

    @property
    def feature_length(self) -> int:
        return len(self.parameters())

    def as_batch(self, x: np.ndarray | Tensor) -> Tuple[np.ndarray, bool]:
        """Return ``(batch, was_single)`` after checking *x* against the input shape."""

        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if tuple(data.shape) == self.input_shape:
            return data[None, ...], True
        if data.ndim == len(self.input_shape) + 1 and tuple(data.shape[1:]) == self.input_shape:
            return data, False
        raise ShapeError(f"model expects inputs of shape {self.input_shape}, got {tuple(data.shape)}")

    def logits(self, x: Tensor) -> Tensor:
        """Run every layer except the trailing softmax."""

        for layer in self.layers[:-1]:
            x = layer.forward(x)
        return x

    def forward(self, x: Tensor) -> ModelOutput:
        logits = self.logits(x)
        return ModelOutput(logits=logits, probs=self.layers[-1].forward(logits))

    def activations(self, x: np.ndarray) -> List[np.ndarray]:
        """Flattened per-sample outputs of each conv/dense layer after its nonlinearity.

        The final dense layer contributes its logits.
        """

        batch, _ = self.as_batch(x)
        recorded: List[np.ndarray] = []
        with ad.no_tape():
            current = Tensor(batch)
            pending = False
            for layer in self.layers[:-1]:
                current = layer.forward(current)
                if layer.kind in PARAMETRIC_KINDS:
                    if pending:
                        recorded.append(previous)
                    previous = current.data.reshape(current.shape[0], -1)
                    pending = True
                elif layer.kind == "relu" and pending:
                    recorded.append(current.data.reshape(current.shape[0], -1))
                    pending = False
                elif pending:
                    recorded.append(previous)
                    pending = False
            if pending:
                recorded.append(previous)
        return recorded

    def state(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.parameters():
            if name not in state:
                raise ArtifactFormatError(f"checkpoint is missing parameter {name}")
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ArtifactFormatError(f"parameter {name} has shape {value.shape}, expected {tensor.shape}")
            tensor.data = value.astype(tensor.data.dtype, copy=True)

    def checksum(self) -> str:
        """SHA-256 over parameter names, shapes and float64 payloads."""

        digest = hashlib.sha256()
        digest.update(canonical_json(self.architecture).encode("utf-8"))
        for name, tensor in self.parameters():
            digest.update(name.encode("utf-8"))
            digest.update(np.asarray(tensor.shape, dtype="<u4").tobytes())
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return digest.hexdigest()


def predict(model: Model, x: np.ndarray, *, batch_size: int = 512) -> Tuple[np.ndarray, np.ndarray | int]:
    """Return ``(probs, y)``; ``y = argmax(probs)`` with ties going to the lowest index.

    A single image yields a probability vector and an ``int``; a batch yields
    ``(batch, classes)`` probabilities and an index array.
    """

    batch, single = model.as_batch(x)
    chunks = []
    with ad.no_tape():
        for start in range(0, batch.shape[0], batch_size):
            chunks.append(model.forward(Tensor(batch[start:start + batch_size])).probs.data)
    probs = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.classes))
    labels = np.argmax(probs, axis=1)
    if single:
        return probs[0], int(labels[0])
    return probs, labels


def cross_entropy_loss(model: Model, output: ModelOutput, y: int | Sequence[int], *, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy ``-log(max(F(x)[y], 1e-12))`` using the fused adjoint."""

    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= model.classes):
        raise ShapeError(f"label out of range for {model.classes} classes: {labels.tolist()}")
    return ad.softmax_cross_entropy(output.logits, labels, reduction=reduction)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return 0.0
    _, predicted = predict(model, images)
    return float(np.mean(predicted == np.asarray(labels)))


@dataclass
class TrainConfig:
    epochs: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    log_every: int = 100


@dataclass
class TrainResult:
    model: Model
    train_accuracy: float
    test_accuracy: Optional[float]
    losses: List[float] = field(default_factory=list)


def train(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    *,
    test_images: Optional[np.ndarray] = None,
    test_labels: Optional[np.ndarray] = None,
) -> TrainResult:
    """Mini-batch SGD with momentum, in place; deterministic for a fixed seed."""

    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ShapeError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    model.as_batch(images[:1])

    rng = np.random.default_rng(config.seed)
    params = [tensor for _, tensor in model.parameters()]
    velocity = [np.zeros_like(p.data) for p in params]
    losses: List[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            try:
                with ad.Tape() as tape:
                    output = model.forward(Tensor(images[batch]))
                    loss = cross_entropy_loss(model, output, labels[batch])
                grads = ad.gradients(tape, loss, params)
            except NumericalError:
                raise DivergenceError(step, float("nan")) from None
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            for param, grad, vel in zip(params, grads, velocity):
                vel *= config.momentum
                vel -= config.learning_rate * grad
                param.data += vel
            losses.append(value)
            running += value
            step += 1
            if config.log_every and step % config.log_every == 0:
                logger.debug("epoch %d step %d loss %.5f", epoch, step, value)
        batches = max(1, int(np.ceil(len(order) / config.batch_size)))
        logger.info("epoch %d/%d mean loss %.5f", epoch + 1, config.epochs, running / batches)

    train_acc = accuracy(model, images, labels)
    test_acc = None
    if test_images is not None and test_labels is not None:
        test_acc = accuracy(model, test_images, test_labels)
    logger.info(
        "training finished: train accuracy %.4f, test accuracy %s",
        train_acc,
        "n/a" if test_acc is None else f"{test_acc:.4f}",
    )
    return TrainResult(model=model, train_accuracy=train_acc, test_accuracy=test_acc, losses=losses)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path: os.PathLike[str] | str) -> None:
    """Write *model* as ``GRNM`` container: config JSON then named float64 tensors."""

    config = canonical_json(model.architecture).encode("utf-8")
    params = model.parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(config)), config, struct.pack("<I", len(params))]
    for name, tensor in params:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, payload: bytes, path: str) -> None:
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise ArtifactFormatError(f"{self.path}: checkpoint truncated at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: os.PathLike[str] | str) -> Model:
    if not os.path.exists(path):
        raise MissingArtifactError(path, "run `train` first")
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), os.fspath(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise ArtifactFormatError(f"{path}: not a granorm checkpoint (bad magic)")
    version, config_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported checkpoint version {version}")

    architecture = json.loads(reader.take(config_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape)
    model = Model.from_architecture(architecture, seed=0)
    model.load_state(state)
    return model
