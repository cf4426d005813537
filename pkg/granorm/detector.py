"""Feature sets and the logistic-regression detection head shared by GraN and LID."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.special import expit

from .errors import DetectorError, StaleArtifactError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
DEFAULT_L2 = 1e-4
DEFAULT_MAX_ITERATIONS = 10_000
DEFAULT_TOLERANCE = 1e-6


@dataclass
class FeatureSet:
    """Per-sample feature vectors for one (detector, cause) cell."""

    detector: str
    cause: str
    values: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    partition: np.ndarray
    model_checksum: str
    feature_names: List[str] = field(default_factory=list)
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.partition = np.asarray(self.partition, dtype="<U5")

    @property
    def feature_length(self) -> int:
        return int(self.values.shape[1])

    def select(self, partition: str) -> "FeatureSet":
        mask = self.partition == partition
        return FeatureSet(
            self.detector,
            self.cause,
            self.values[mask],
            self.labels[mask],
            self.sample_ids[mask],
            self.partition[mask],
            self.model_checksum,
            list(self.feature_names),
            dict(self.params),
        )

    def to_doc(self) -> Dict[str, Any]:
        return {
            "detector": self.detector,
            "cause": self.cause,
            "model_checksum": self.model_checksum,
            "feature_names": list(self.feature_names),
            "params": self.params,
            "values": self.values.tolist(),
            "labels": self.labels.tolist(),
            "sample_ids": self.sample_ids.tolist(),
            "partition": self.partition.tolist(),
        }

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "FeatureSet":
        return cls(
            detector=doc["detector"],
            cause=doc["cause"],
            values=np.asarray(doc["values"], dtype=np.float64),
            labels=np.asarray(doc["labels"], dtype=np.int64),
            sample_ids=np.asarray(doc["sample_ids"], dtype=np.int64),
            partition=np.asarray(doc["partition"], dtype="<U5"),
            model_checksum=doc["model_checksum"],
            feature_names=list(doc.get("feature_names", [])),
            params=dict(doc.get("params", {})),
        )


@dataclass
class DetectorHead:
    """Logistic regression ``p = sigmoid(w . z + b)`` on z-scored features."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    detector: str = "gran"
    cause: str = ""
    model_checksum: str = ""
    iterations: int = 0

    @classmethod
    def zero(cls, feature_length: int, **kwargs: Any) -> "DetectorHead":
        return cls(np.zeros(feature_length), 0.0, np.zeros(feature_length), np.ones(feature_length), **kwargs)

    @property
    def feature_length(self) -> int:
        return int(len(self.weights))

    @property
    def parameter_count(self) -> int:
        return self.feature_length + 1

    def standardize(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.feature_length:
            raise DetectorError(
                f"{self.detector} head expects {self.feature_length} features, got {features.shape[-1]}"
            )
        return (features - self.mean) / self.std

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self.standardize(features) @ self.weights + self.bias

    def score(self, features: np.ndarray) -> np.ndarray | float:
        """Misclassification probability for one vector or each row of a matrix."""

        p = expit(self.decision(features))
        return float(p) if np.ndim(p) == 0 else p

    def check_model(self, checksum: str, path: object = "detector head") -> None:
        if self.model_checksum and checksum != self.model_checksum:
            raise StaleArtifactError(path, "model_checksum", checksum, self.model_checksum)

    def to_doc(self) -> Dict[str, Any]:
        return {
            "detector": self.detector,
            "cause": self.cause,
            "model_checksum": self.model_checksum,
            "feature_length": self.feature_length,
            "parameter_count": self.parameter_count,
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "iterations": self.iterations,
        }

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "DetectorHead":
        head = cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=float(doc["bias"]),
            mean=np.asarray(doc["mean"], dtype=np.float64),
            std=np.asarray(doc["std"], dtype=np.float64),
            detector=doc["detector"],
            cause=doc["cause"],
            model_checksum=doc["model_checksum"],
            iterations=int(doc.get("iterations", 0)),
        )
        if head.feature_length != doc["feature_length"] or len(head.mean) != head.feature_length:
            raise DetectorError(f"{head.detector}/{head.cause}: inconsistent feature length in head file")
        return head


def fit_detector(
    features: np.ndarray,
    labels: np.ndarray,
    *,
    l2: float = DEFAULT_L2,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: Optional[int] = None,
    detector: str = "gran",
    cause: str = "",
    model_checksum: str = "",
) -> DetectorHead:
    """Full-batch gradient descent on the L2-penalised logistic loss.

    Features are z-scored with their own statistics.  The weights start at
    zero and the bias is not penalised.  The step size is the inverse
    Lipschitz constant of the gradient, so the loss decreases monotonically.
    Zero initialisation makes the fit deterministic; *seed* is only recorded.
    """

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) != len(y):
        raise DetectorError(f"{len(x)} feature vectors but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise DetectorError(f"{detector}/{cause}: fitting needs both labels, got only {np.unique(y).tolist()}")

    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    z = (x - mean) / std
    design = np.hstack([z, np.ones((len(z), 1))])
    n = len(design)
    curvature = np.linalg.eigvalsh(design.T @ design / n)[-1]
    step = 1.0 / (0.25 * curvature + l2)
    penalty = np.ones(design.shape[1])
    penalty[-1] = 0.0

    theta = np.zeros(design.shape[1])
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        residual = expit(design @ theta) - y
        grad = design.T @ residual / n + l2 * penalty * theta
        if np.linalg.norm(grad) < tolerance:
            break
        theta -= step * grad
        if iteration % 1000 == 0:
            logger.debug("%s/%s: iteration %d gradient norm %.3e", detector, cause, iteration, np.linalg.norm(grad))
    logger.info("%s/%s: logistic head fitted in %d iterations (seed %s)", detector, cause, iteration, seed)
    return DetectorHead(
        weights=theta[:-1].copy(),
        bias=float(theta[-1]),
        mean=mean,
        std=std,
        detector=detector,
        cause=cause,
        model_checksum=model_checksum,
        iterations=iteration,
    )


def fit_feature_set(features: FeatureSet, **kwargs: Any) -> DetectorHead:
    """Fit a head on the ``train`` partition of *features*."""

    train = features.select("train")
    return fit_detector(
        train.values,
        train.labels,
        detector=features.detector,
        cause=features.cause,
        model_checksum=features.model_checksum,
        **kwargs,
    )


def score(head: DetectorHead, features: np.ndarray) -> np.ndarray | float:
    return head.score(features)
