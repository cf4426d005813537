"""Minimal reverse-mode automatic differentiation over numpy arrays.

Images use NHWC layout: ``(batch, height, width, channels)``.  Convolution
kernels are ``(kernel_h, kernel_w, in_channels, out_channels)``.  Like the
usual deep learning frameworks, :func:`conv2d` computes a cross-correlation.

Primitives record themselves on the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = softmax_cross_entropy(model.logits(x), labels)
    grads = backward(tape, loss)

Each recorded entry holds an adjoint closure that maps the output adjoint to
input adjoints; :func:`backward` replays the entries once each, newest first.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GranormError, NumericalError, ShapeError

PROB_FLOOR = 1e-12
SUPPORTED_DTYPES = {"float64": np.float64, "float32": np.float32}

_default_dtype = np.float64
_state = threading.local()


class AutodiffError(GranormError):
    pass


def set_default_dtype(name: str) -> None:
    """Select the floating dtype used for new tensors (``float64`` or ``float32``)."""

    global _default_dtype
    try:
        _default_dtype = SUPPORTED_DTYPES[name]
    except KeyError:
        raise ValueError(f"Unsupported dtype {name!r}; expected one of {sorted(SUPPORTED_DTYPES)}") from None


class Tensor:
    """An n-dimensional array that can take part in taped computations."""

    __slots__ = ("data", "requires_grad", "name", "is_leaf", "__weakref__")

    def __init__(
        self,
        data: object,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: object = None,
    ) -> None:
        array = np.array(data, dtype=dtype or _default_dtype, copy=True)
        if array.ndim == 0:
            array = array.reshape(())
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


Adjoint = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


class Tape:
    """Ordered record of primitive operations.

    A tape belongs to one thread; separate tapes may be used concurrently on
    disjoint data.  The same tape may be replayed more than once.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.op_counts: Counter = Counter()
        self.backward_calls = 0
        self.last_replay: List[int] = []
        self._outputs: Dict[int, int] = {}

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, adjoint: Adjoint) -> None:
        self._outputs[id(output)] = len(self.entries)
        self.entries.append(TapeEntry(op, inputs, output, adjoint))
        self.op_counts[op] += 1

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _stack().pop()


def _stack() -> List[Optional[Tape]]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Run the enclosed primitives without recording them."""

    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(op: str, inputs: Tuple[Tensor, ...], result: np.ndarray, adjoint: Adjoint) -> Tensor:
    if not np.all(np.isfinite(result)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = result
    out.name = None
    out.is_leaf = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, adjoint)
    return out


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        ga = g @ b_data.T if needs[0] else None
        gb = a_data.T @ g if needs[1] else None
        return ga, gb

    return _emit("matmul", (a, b), a_data @ b_data, adjoint)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match input {x.shape}")
    channels = bias.shape[0]

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        gb = g.reshape(-1, channels).sum(axis=0) if needs[1] else None
        return (g if needs[0] else None), gb

    return _emit("add_bias", (x, bias), x.data + bias.data, adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (g if needs[0] else None), (g if needs[1] else None)

    return _emit("add", (a, b), a.data + b.data, adjoint)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (g * factor,)

    return _emit("scale", (x,), x.data * factor, adjoint)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False), adjoint)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ShapeError(f"softmax: needs at least one axis, got {x.shape}")
    probs = _softmax(x.data)

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (probs * (g - np.sum(g * probs, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), probs, adjoint)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        result = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    original = x.shape

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (g.reshape(original),)

    return _emit("reshape", (x,), result, adjoint)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis but the first (batch) axis."""

    if x.ndim < 1:
        raise ShapeError(f"flatten: needs a batch axis, got {x.shape}")
    return reshape(x, (x.shape[0], -1))


def conv2d(x: Tensor, w: Tensor, *, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of NHWC *x* with an HWIO kernel *w* (valid by default)."""

    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    batch, height, width, channels = x.shape
    kh, kw, _, filters = w.shape
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * out_h * out_w, kh * kw * channels)
    w_mat = w.data.reshape(kh * kw * channels, filters)
    result = (cols @ w_mat).reshape(batch, out_h, out_w, filters)
    padded_shape = xp.shape

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        g_mat = g.reshape(-1, filters)
        gw = (cols.T @ g_mat).reshape(w.shape) if needs[1] else None
        gx = None
        if needs[0]:
            dcols = (g_mat @ w_mat.T).reshape(batch, out_h, out_w, kh, kw, channels)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, padding:padding + height, padding:padding + width, :] if padding else dxp
        return gx, gw

    return _emit("conv2d", (x, w), result, adjoint)


def maxpool2d(x: Tensor, *, size: int = 2, stride: int | None = None) -> Tensor:
    """Max-pool NHWC *x*; ties resolve to the first index in row-major window order."""

    stride = stride or size
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NHWC input, got {x.shape}")
    batch, height, width, channels = x.shape
    out_h = (height - size) // stride + 1
    out_w = (width - size) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"maxpool2d: window {size} larger than input {x.shape}")

    windows = sliding_window_view(x.data, (size, size), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    flat = windows.reshape(batch, out_h, out_w, channels, size * size)
    arg = flat.argmax(axis=-1)
    result = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h)[None, :, None, None] * stride + arg // size
    cols = np.arange(out_w)[None, None, :, None] * stride + arg % size
    b_idx = np.arange(batch)[:, None, None, None]
    c_idx = np.arange(channels)[None, None, None, :]
    source = (((b_idx * height + rows) * width + cols) * channels + c_idx).ravel()
    total = x.size

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        gx = np.bincount(source, weights=g.ravel(), minlength=total)
        return (gx.astype(g.dtype, copy=False).reshape(batch, height, width, channels),)

    return _emit("maxpool2d", (x,), result, adjoint)


def sum_all(x: Tensor) -> Tensor:
    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), adjoint)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant *weights* array."""

    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} do not match input {x.shape}")

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        return (g * weights,)

    return _emit("weighted_sum", (x,), np.asarray(np.sum(x.data * weights)), adjoint)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int], *, reduction: str = "mean") -> Tensor:
    """Fused softmax + cross-entropy on ``(batch, classes)`` logits.

    The per-sample value is ``-log(max(p[y], 1e-12))``; the adjoint at the
    logits is ``p - onehot(y)``.
    """

    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {batch} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"softmax_cross_entropy: labels must lie in [0, {classes})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"Unknown reduction {reduction!r}")

    probs = _softmax(logits.data)
    picked = probs[np.arange(batch), labels]
    losses = -np.log(np.maximum(picked, PROB_FLOOR))
    divisor = batch if reduction == "mean" else 1
    value = np.asarray(losses.sum() / divisor)

    def adjoint(g: np.ndarray, needs: Tuple[bool, ...]):
        delta = probs.copy()
        delta[np.arange(batch), labels] -= 1.0
        return (delta * (g / divisor),)

    return _emit("softmax_cross_entropy", (logits,), value, adjoint)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> Dict[int, np.ndarray]:
    """Return ``{id(leaf): d loss / d leaf}`` for the leaves reachable from *loss*.

    *wrt* defaults to every leaf tensor with ``requires_grad`` used on the
    tape.  Adjoints of intermediate tensors are discarded.
    """

    if loss.size != 1 or loss.ndim > 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise AutodiffError("loss was not produced under this tape")

    if wrt is None:
        leaves: Dict[int, Tensor] = {}
        for entry in tape.entries:
            for tensor in entry.inputs:
                if tensor.is_leaf and tensor.requires_grad:
                    leaves.setdefault(id(tensor), tensor)
        targets = list(leaves.values())
    else:
        targets = list(wrt)
    target_ids = {id(t) for t in targets}

    # Tensors whose adjoint is needed to reach a target.
    needed = set(target_ids)
    for entry in tape.entries:
        if any(id(t) in needed for t in entry.inputs):
            needed.add(id(entry.output))

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    stop = tape._outputs[id(loss)]
    visited: List[int] = []
    for index in range(stop, -1, -1):
        entry = tape.entries[index]
        visited.append(index)
        key = id(entry.output)
        g = adjoints.get(key) if key in target_ids else adjoints.pop(key, None)
        if g is None:
            continue
        needs = tuple(id(t) in needed for t in entry.inputs)
        if not any(needs):
            continue
        grads = entry.adjoint(g, needs)
        for tensor, need, grad in zip(entry.inputs, needs, grads):
            if not need or grad is None:
                continue
            slot = id(tensor)
            adjoints[slot] = adjoints[slot] + grad if slot in adjoints else grad

    tape.backward_calls += 1
    tape.last_replay = visited
    result: Dict[int, np.ndarray] = {}
    for tensor in targets:
        grad = adjoints.get(id(tensor))
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"gradient for {tensor.name or 'tensor'} is not finite")
        result[id(tensor)] = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
    return result


def gradients(tape: Tape, loss: Tensor, tensors: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of *loss* for *tensors* in order; unreachable tensors get zeros."""

    grads = backward(tape, loss, wrt=tensors)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in tensors]
