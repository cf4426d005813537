"""Adversarial attacks on a trained :class:`~granorm.nn.Model`.

All attacks work on ``[0, 1]`` images and return perturbed copies; model
parameters are only read.  Input gradients come from the autodiff tape with
the image registered as a differentiable leaf.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import Model, cross_entropy_loss, predict
from .schema import ATTACK_KINDS

logger = logging.getLogger(__name__)

BATCH_SIZE = 256
TANH_SQUEEZE = 1.0 - 1e-6
CW_LARGE_CONST = 1e10


@dataclass
class AttackConfig:
    kind: str
    epsilon: float = 0.3
    alpha: float = 0.03
    iterations: int = 10
    theta: float = 1.0
    gamma: float = 0.14
    pairs: bool = True
    confidence: float = 0.0
    binary_search_steps: int = 5
    max_iterations: int = 200
    learning_rate: float = 0.01
    initial_const: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"Unknown attack {self.kind!r}; expected one of {', '.join(ATTACK_KINDS)}")
        for name in ("epsilon", "alpha", "gamma", "learning_rate", "initial_const", "confidence"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{self.kind}: {name} must be >= 0")
        for name in ("iterations", "binary_search_steps", "max_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{self.kind}: {name} must be >= 1")

    @classmethod
    def from_dict(cls, kind: str, params: Mapping[str, Any], seed: int = 0) -> "AttackConfig":
        known = set(cls.__dataclass_fields__) - {"kind", "seed"}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"{kind}: unknown attack parameters {', '.join(sorted(unknown))}")
        return cls(kind=kind, seed=seed, **dict(params))

    def params(self) -> Dict[str, Any]:
        """Hyperparameters relevant to :attr:`kind`, as recorded in manifests."""

        relevant = {
            "fgsm": ("epsilon",),
            "bim_a": ("epsilon", "alpha", "iterations"),
            "bim_b": ("epsilon", "alpha", "iterations"),
            "jsma": ("theta", "gamma", "pairs"),
            "cw": ("confidence", "binary_search_steps", "max_iterations", "learning_rate", "initial_const"),
        }[self.kind]
        values = asdict(self)
        return {key: values[key] for key in relevant + ("seed",)}


@dataclass
class AttackResult:
    kind: str
    x_adv: np.ndarray
    success: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else 0.0


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``d L(F(x), y) / d x`` per sample (summed loss keeps samples independent)."""

    leaf = Tensor(x, requires_grad=True, name="input")
    with ad.Tape() as tape:
        loss = cross_entropy_loss(model, model.forward(leaf), y, reduction="sum")
    (grad,) = ad.gradients(tape, loss, [leaf])
    return grad


def _batched(model: Model, x: np.ndarray, y: Any) -> tuple[np.ndarray, np.ndarray, bool]:
    batch, single = model.as_batch(x)
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape[0] != batch.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {batch.shape[0]} images")
    return batch, labels, single


def fgsm(model: Model, x: np.ndarray, y_true: Any, epsilon: float) -> np.ndarray:
    """One signed-gradient step: ``clip(x + eps * sign(grad_x L), 0, 1)``."""

    batch, labels, single = _batched(model, x, y_true)
    out = np.empty_like(batch)
    for start in range(0, len(batch), BATCH_SIZE):
        chunk = slice(start, start + BATCH_SIZE)
        grad = input_gradient(model, batch[chunk], labels[chunk])
        out[chunk] = np.clip(batch[chunk] + epsilon * np.sign(grad), 0.0, 1.0)
    return out[0] if single else out


def bim(model: Model, x: np.ndarray, y_true: Any, config: AttackConfig, variant: str = "b") -> np.ndarray:
    """Iterated FGSM projected onto the eps-ball around *x* and onto ``[0, 1]``.

    Variant ``a`` freezes each sample as soon as it is misclassified (checked
    before the first step as well); variant ``b`` runs every iteration.
    """

    if variant not in ("a", "b"):
        raise ValueError(f"BIM variant must be 'a' or 'b', got {variant!r}")
    batch, labels, single = _batched(model, x, y_true)
    out = batch.copy()
    for start in range(0, len(batch), BATCH_SIZE):
        chunk = slice(start, start + BATCH_SIZE)
        origin, target, adv = batch[chunk], labels[chunk], out[chunk]
        active = np.ones(len(origin), dtype=bool)
        for step in range(config.iterations):
            if variant == "a":
                _, predicted = predict(model, adv)
                active &= predicted == target
                if not active.any():
                    logger.debug("bim_a: all samples misclassified after %d steps", step)
                    break
            idx = np.flatnonzero(active)
            grad = input_gradient(model, adv[idx], target[idx])
            stepped = adv[idx] + config.alpha * np.sign(grad)
            stepped = np.clip(stepped, origin[idx] - config.epsilon, origin[idx] + config.epsilon)
            adv[idx] = np.clip(stepped, 0.0, 1.0)
        out[chunk] = adv
    return out[0] if single else out


# --------------------------------------------------------------------- JSMA


@dataclass
class JsmaOutcome:
    x_adv: np.ndarray
    success: bool
    modified: list[int]
    iterations: int


def logit_jacobian(model: Model, x: np.ndarray) -> np.ndarray:
    """``(classes, pixels)`` Jacobian of the logits at a single image *x*."""

    classes = model.classes
    replicated = Tensor(np.repeat(x[None, ...], classes, axis=0), requires_grad=True, name="input")
    with ad.Tape() as tape:
        selected = ad.weighted_sum(model.logits(replicated), np.eye(classes))
    (grad,) = ad.gradients(tape, selected, [replicated])
    return grad.reshape(classes, -1)


def jsma(model: Model, x: np.ndarray, y_target: int, config: AttackConfig) -> JsmaOutcome:
    """Greedy saliency-map attack towards *y_target*.

    Each iteration picks the pixel pair (or single pixel) whose target-logit
    derivative ``a`` is positive and whose summed other-logit derivative ``b``
    is negative, maximising ``a * |b|``, and moves it by ``theta``.  Modified
    pixels leave the search domain.  At most ``ceil(gamma * pixels)`` pixels
    change.
    """

    batch, single = model.as_batch(x)
    if not single:
        raise ShapeError("jsma attacks one image at a time")
    adv = batch[0].copy()
    flat = adv.reshape(-1)
    budget = int(math.ceil(config.gamma * flat.size - 1e-9))
    if config.theta > 0:
        domain = flat < 1.0
    else:
        domain = flat > 0.0
    modified: list[int] = []
    iterations = 0

    def hit() -> bool:
        return predict(model, adv)[1] == y_target

    while len(modified) < budget and not hit():
        iterations += 1
        jac = logit_jacobian(model, adv)
        alpha = jac[y_target]
        beta = jac.sum(axis=0) - alpha
        if config.theta < 0:
            alpha, beta = -alpha, -beta
        remaining = budget - len(modified)
        chosen = _pick_pair(alpha, beta, domain) if config.pairs and remaining >= 2 else None
        if chosen is None:
            chosen = _pick_single(alpha, beta, domain)
        if chosen is None:
            logger.debug("jsma: no salient pixel left after %d iterations", iterations)
            break
        for index in chosen:
            flat[index] = np.clip(flat[index] + config.theta, 0.0, 1.0)
            domain[index] = False
            modified.append(int(index))
    return JsmaOutcome(adv, bool(hit()), modified, iterations)


def _pick_single(alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> Optional[tuple[int]]:
    valid = domain & (alpha > 0) & (beta < 0)
    if not valid.any():
        return None
    score = np.where(valid, alpha * np.abs(beta), -np.inf)
    return (int(np.argmax(score)),)


def _pick_pair(alpha: np.ndarray, beta: np.ndarray, domain: np.ndarray) -> Optional[tuple[int, int]]:
    idx = np.flatnonzero(domain)
    if len(idx) < 2:
        return None
    a = alpha[idx][:, None] + alpha[idx][None, :]
    b = beta[idx][:, None] + beta[idx][None, :]
    valid = (a > 0) & (b < 0) & np.triu(np.ones((len(idx), len(idx)), dtype=bool), k=1)
    if not valid.any():
        return None
    score = np.where(valid, a * np.abs(b), -np.inf)
    p, q = np.unravel_index(int(np.argmax(score)), score.shape)
    return int(idx[p]), int(idx[q])


def jsma_target(probs: np.ndarray) -> int:
    """Second most probable class; ties resolve to the lower index."""

    return int(np.argsort(-probs, kind="stable")[1])


# ----------------------------------------------------------------------- CW


def cw_l2(model: Model, x: np.ndarray, y_true: Any, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Carlini-Wagner L2 attack; returns ``(x_adv, success)``.

    Optimises ``w`` with ``x_adv = (tanh(w) + 1) / 2`` using Adam on
    ``||x_adv - x||^2 + c * max(Z_y - max_{j != y} Z_j, -kappa)``, binary
    searching ``c`` per sample.  Failed samples come back unchanged.
    """

    batch, labels, single = _batched(model, x, y_true)
    best = batch.copy()
    success = np.zeros(len(batch), dtype=bool)
    for start in range(0, len(batch), BATCH_SIZE):
        chunk = slice(start, start + BATCH_SIZE)
        adv, ok = _cw_chunk(model, batch[chunk], labels[chunk], config)
        best[chunk] = np.where(ok.reshape((-1,) + (1,) * (batch.ndim - 1)), adv, batch[chunk])
        success[chunk] = ok
    if single:
        return best[0], success[:1]
    return best, success


def _cw_chunk(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    n = len(x)
    axes = tuple(range(1, x.ndim))
    onehot = np.eye(model.classes)[y]
    w0 = np.arctanh((2.0 * x - 1.0) * TANH_SQUEEZE)
    const = np.full(n, config.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, CW_LARGE_CONST)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()

    for outer in range(config.binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        for step in range(1, config.max_iterations + 1):
            adv = (np.tanh(w) + 1.0) / 2.0
            leaf = Tensor(adv, requires_grad=True, name="input")
            with ad.Tape() as tape:
                logits = model.logits(leaf)
            z = logits.data
            real = np.sum(z * onehot, axis=1)
            other = np.max(np.where(onehot > 0, -np.inf, z), axis=1)
            margin = real - other
            l2 = np.sum((adv - x) ** 2, axis=axes)

            hit = (np.argmax(z, axis=1) != y) & (margin <= -config.confidence)
            improved = hit & (l2 < best_l2)
            best_l2[improved] = l2[improved]
            best_adv[improved] = adv[improved]
            found |= hit

            # Hinge is active where margin > -kappa; only those rows get a logit gradient.
            active = margin > -config.confidence
            runner_up = np.argmax(np.where(onehot > 0, -np.inf, z), axis=1)
            weights = (onehot - np.eye(model.classes)[runner_up]) * (const * active)[:, None]
            with tape:
                objective = ad.weighted_sum(logits, weights)
            (grad_adv,) = ad.gradients(tape, objective, [leaf])
            grad_adv = grad_adv + 2.0 * (adv - x)
            grad_w = grad_adv * (1.0 - np.tanh(w) ** 2) / 2.0

            m = 0.9 * m + 0.1 * grad_w
            v = 0.999 * v + 0.001 * grad_w ** 2
            m_hat = m / (1.0 - 0.9 ** step)
            v_hat = v / (1.0 - 0.999 ** step)
            w = w - config.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)

        upper = np.where(found, np.minimum(upper, const), upper)
        lower = np.where(found, lower, np.maximum(lower, const))
        bounded = upper < CW_LARGE_CONST / 10
        const = np.where(found | bounded, (lower + upper) / 2.0, const * 10.0)
        logger.debug("cw: binary step %d, %d/%d successful", outer, int(found.sum()), n)
    return best_adv, np.isfinite(best_l2)


# ------------------------------------------------------------------ dispatch


def run_attack(model: Model, images: np.ndarray, labels: np.ndarray, config: AttackConfig) -> AttackResult:
    """Attack every image; success means ``argmax F(x_adv) != label``."""

    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    kind = config.kind
    if kind == "fgsm":
        x_adv = fgsm(model, images, labels, config.epsilon)
    elif kind in ("bim_a", "bim_b"):
        x_adv = bim(model, images, labels, config, variant=kind[-1])
    elif kind == "jsma":
        probs, _ = predict(model, images)
        outcomes = [jsma(model, image, jsma_target(p), config) for image, p in zip(images, probs)]
        x_adv = np.stack([o.x_adv for o in outcomes]) if outcomes else images.copy()
    else:
        x_adv, _ = cw_l2(model, images, labels, config)
    _, predicted = predict(model, x_adv) if len(x_adv) else (None, np.zeros(0, dtype=np.int64))
    success = np.asarray(predicted) != labels
    result = AttackResult(kind, x_adv, success, config.params())
    logger.info("%s: %d/%d successful (%.1f%%)", kind, int(success.sum()), len(success), 100 * result.success_rate)
    return result
