"""Detection set-ups: balanced, split image collections labelled correct (0) or misclassified (1)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from .attacks import AttackConfig, AttackResult, run_attack
from .data import ImageDataset
from .errors import ArtifactFormatError, CalibrationError, EmptySetupError
from .nn import Model, predict
from .schema import CAUSES

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.2
# Perturbed samples get ids offset from their source image id.
PERTURBED_ID_OFFSET = 1_000_000

NOISE_SIGMA_MAX = 2.0
NOISE_TARGET_RATE = 0.5
NOISE_TOLERANCE = 0.02
NOISE_MAX_ITERATIONS = 30


@dataclass
class DetectionSetup:
    """Balanced binary detection data for one cause.

    ``labels`` are detector labels: 0 correctly classified, 1 misclassified.
    ``partition`` holds ``"train"`` or ``"test"`` per sample.
    """

    cause: str
    images: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    source_ids: np.ndarray
    partition: np.ndarray
    params: Dict[str, Any] = field(default_factory=dict)
    model_checksum: str = ""

    def __post_init__(self) -> None:
        if self.cause not in CAUSES:
            raise ValueError(f"unknown cause {self.cause!r}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.partition = np.asarray(self.partition, dtype="<U5")
        check_setup(self)

    def __len__(self) -> int:
        return len(self.labels)

    def mask(self, partition: str) -> np.ndarray:
        return self.partition == partition

    def counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for part in ("train", "test"):
            mask = self.mask(part)
            out[f"{part}_correct"] = int(np.sum(self.labels[mask] == 0))
            out[f"{part}_misclassified"] = int(np.sum(self.labels[mask] == 1))
        return out

    def to_manifest(self) -> Dict[str, Any]:
        return {
            "cause": self.cause,
            "model_checksum": self.model_checksum,
            "params": self.params,
            "counts": self.counts(),
            "samples": [
                {"id": int(i), "source_id": int(s), "label": int(lbl), "partition": str(p)}
                for i, s, lbl, p in zip(self.sample_ids, self.source_ids, self.labels, self.partition)
            ],
        }

    @classmethod
    def from_manifest(cls, doc: Dict[str, Any], images: np.ndarray) -> "DetectionSetup":
        samples = doc["samples"]
        if len(samples) != len(images):
            raise ArtifactFormatError(f"setup {doc.get('cause')}: {len(samples)} samples but {len(images)} images")
        return cls(
            cause=doc["cause"],
            images=images,
            labels=np.array([s["label"] for s in samples], dtype=np.int64),
            sample_ids=np.array([s["id"] for s in samples], dtype=np.int64),
            source_ids=np.array([s["source_id"] for s in samples], dtype=np.int64),
            partition=np.array([s["partition"] for s in samples], dtype="<U5"),
            params=doc.get("params", {}),
            model_checksum=doc["model_checksum"],
        )


def check_setup(setup: DetectionSetup) -> None:
    """Raise ``ValueError`` unless both partitions are balanced, 80/20 and disjoint."""

    n = len(setup.labels)
    for name in ("images", "sample_ids", "source_ids", "partition"):
        if len(getattr(setup, name)) != n:
            raise ValueError(f"setup {setup.cause}: {name} has {len(getattr(setup, name))} entries, expected {n}")
    if not np.isin(setup.labels, (0, 1)).all():
        raise ValueError(f"setup {setup.cause}: labels must be 0 or 1")
    if not np.isin(setup.partition, ("train", "test")).all():
        raise ValueError(f"setup {setup.cause}: partition entries must be train or test")
    if len(np.unique(setup.sample_ids)) != n:
        raise ValueError(f"setup {setup.cause}: a sample id appears more than once")
    for part in ("train", "test"):
        labels = setup.labels[setup.partition == part]
        if np.sum(labels == 0) != np.sum(labels == 1):
            raise ValueError(f"setup {setup.cause}: {part} partition is not balanced")
    test = int(np.sum(setup.partition == "test"))
    if abs(test - TEST_FRACTION * n) > 1.0:
        raise ValueError(f"setup {setup.cause}: {test} of {n} samples in test, expected 20%")


def balance_and_split(labels: np.ndarray, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded down-sampling of the majority label, then an 80/20 split per label.

    Returns ``(indices, partition)``; indices are sorted ascending.
    """

    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    m = min(len(positives), len(negatives))
    if m == 0:
        raise EmptySetupError(
            f"cannot balance {len(negatives)} correctly classified against {len(positives)} misclassified samples"
        )
    test_per_class = int(np.floor(TEST_FRACTION * m + 0.5))
    chosen = []
    partition = []
    for pool in (negatives, positives):
        picked = rng.permutation(pool)[:m]
        chosen.append(picked)
        partition.append(np.where(np.arange(m) < test_per_class, "test", "train"))
    indices = np.concatenate(chosen)
    parts = np.concatenate(partition)
    order = np.argsort(indices, kind="stable")
    return indices[order], parts[order]


def _assemble(
    cause: str,
    images: np.ndarray,
    labels: np.ndarray,
    sample_ids: np.ndarray,
    source_ids: np.ndarray,
    seed: int,
    params: Dict[str, Any],
    model: Model,
) -> DetectionSetup:
    indices, partition = balance_and_split(labels, seed)
    setup = DetectionSetup(
        cause=cause,
        images=images[indices],
        labels=labels[indices],
        sample_ids=sample_ids[indices],
        source_ids=source_ids[indices],
        partition=partition,
        params=params,
        model_checksum=model.checksum(),
    )
    counts = setup.counts()
    logger.info(
        "%s setup: %d samples (train %d/%d, test %d/%d)",
        cause,
        len(setup),
        counts["train_correct"],
        counts["train_misclassified"],
        counts["test_correct"],
        counts["test_misclassified"],
    )
    return setup


def correctly_classified(model: Model, pretest: ImageDataset) -> Tuple[ImageDataset, np.ndarray]:
    """Return the correctly classified subset and its predictions."""

    _, predicted = predict(model, pretest.images)
    mask = np.asarray(predicted) == pretest.labels
    return pretest.subset(np.flatnonzero(mask)), np.asarray(predicted)[mask]


def build_adversarial_setup(
    model: Model,
    pretest: ImageDataset,
    config: AttackConfig,
    seed: int,
    *,
    limit: Optional[int] = None,
    result: Optional[AttackResult] = None,
) -> Tuple[DetectionSetup, AttackResult]:
    """Successful adversarials (label 1) against the correctly classified originals (label 0).

    A previously computed *result* for the same originals skips the attack.
    """

    originals, predicted = correctly_classified(model, pretest)
    originals = originals.head(limit)
    predicted = predicted[: len(originals)]
    if result is None:
        result = run_attack(model, originals.images, predicted, config)
    elif len(result.x_adv) != len(originals):
        raise ArtifactFormatError(
            f"{config.kind}: attack covers {len(result.x_adv)} images but {len(originals)} originals qualify"
        )
    if not result.success.any():
        raise EmptySetupError(f"{config.kind}: the attack produced no successful adversarial examples")

    winners = np.flatnonzero(result.success)
    images = np.concatenate([originals.images, result.x_adv[winners]])
    labels = np.concatenate([np.zeros(len(originals), dtype=np.int64), np.ones(len(winners), dtype=np.int64)])
    source_ids = np.concatenate([originals.ids, originals.ids[winners]])
    sample_ids = np.concatenate([originals.ids, originals.ids[winners] + PERTURBED_ID_OFFSET])
    params = dict(result.params)
    params["success_rate"] = result.success_rate
    params["attacked"] = len(originals)
    setup = _assemble(config.kind, images, labels, sample_ids, source_ids, seed, params, model)
    return setup, result


def image_noise(shape: Tuple[int, ...], seed: int, image_id: int) -> np.ndarray:
    """Standard normal noise for one image, reproducible from ``(seed, image_id)``."""

    return np.random.default_rng([seed, int(image_id)]).standard_normal(shape)


def calibrate_noise(
    rate: Callable[[float], float],
    *,
    high: float = NOISE_SIGMA_MAX,
    target: float = NOISE_TARGET_RATE,
    tolerance: float = NOISE_TOLERANCE,
    max_iterations: int = NOISE_MAX_ITERATIONS,
) -> Tuple[float, float, int]:
    """Bisect for ``sigma`` with ``rate(sigma)`` within *tolerance* of *target*.

    Returns ``(sigma, rate, iterations)``; raises :class:`CalibrationError`
    when the rate is out of reach or the tolerance is never met.
    """

    low_rate, high_rate = rate(0.0), rate(high)
    if not low_rate <= target <= high_rate:
        raise CalibrationError(
            f"noise cannot reach a {target:.0%} misclassification rate: "
            f"sigma in [0, {high}] yields rates in [{low_rate:.3f}, {high_rate:.3f}]"
        )
    lo, hi = 0.0, high
    best = (high, high_rate)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        mid = (lo + hi) / 2.0
        current = rate(mid)
        if abs(current - target) < abs(best[1] - target):
            best = (mid, current)
        if abs(current - target) <= tolerance:
            best = (mid, current)
            break
        if current < target:
            lo = mid
        else:
            hi = mid
    else:
        raise CalibrationError(
            f"noise calibration stopped after {max_iterations} iterations: closest sigma {best[0]:.5f} "
            f"gives rate {best[1]:.3f}, outside {target:.2f} +/- {tolerance:.2f}"
        )
    return best[0], best[1], iterations


def build_noisy_setup(
    model: Model,
    pretest: ImageDataset,
    seed: int,
    *,
    clip: bool = True,
) -> DetectionSetup:
    """Gaussian-noised images with one global sigma calibrated so half are misclassified."""

    originals, predicted = correctly_classified(model, pretest)
    if len(originals) == 0:
        raise EmptySetupError("noisy: the model classifies no pre-test image correctly")
    noise = np.stack([image_noise(originals.image_shape, seed, i) for i in originals.ids])

    def perturb(sigma: float) -> np.ndarray:
        noisy = originals.images + sigma * noise
        return np.clip(noisy, 0.0, 1.0) if clip else noisy

    def rate(sigma: float) -> float:
        _, labels = predict(model, perturb(sigma))
        return float(np.mean(np.asarray(labels) != predicted))

    sigma, achieved, iterations = calibrate_noise(rate)
    logger.info("noisy: sigma*=%.5f gives misclassification rate %.4f after %d bisection steps", sigma, achieved, iterations)
    images = perturb(sigma)
    _, labels = predict(model, images)
    detector_labels = (np.asarray(labels) != predicted).astype(np.int64)
    params = {"sigma": sigma, "rate": achieved, "clip": bool(clip), "iterations": iterations, "seed": seed}
    return _assemble(
        "noisy", images, detector_labels, originals.ids + PERTURBED_ID_OFFSET, originals.ids, seed, params, model
    )


def build_wrong_setup(model: Model, pretest: ImageDataset, seed: int) -> DetectionSetup:
    """Clean pre-test images labelled by whether the model errs on them."""

    _, predicted = predict(model, pretest.images)
    labels = (np.asarray(predicted) != pretest.labels).astype(np.int64)
    if not labels.any():
        raise EmptySetupError("wrong: the model classifies every pre-test image correctly")
    params = {"accuracy": float(1.0 - labels.mean()), "pretest": len(pretest)}
    return _assemble("wrong", pretest.images, labels, pretest.ids, pretest.ids, seed, params, model)
