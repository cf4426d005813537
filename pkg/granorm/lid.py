"""Local intrinsic dimensionality (LID) baseline detector.

Every sample is compared with a fixed set of reference training images in
the activation space of each conv/dense layer.  The maximum-likelihood
estimate over the ``k`` nearest references,

    LID = -( (1/k) * sum_i log(r_i / r_k) ) ** -1,

forms one feature per recorded layer.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .data import ImageDataset
from .detector import FeatureSet
from .errors import EmptySetupError, NumericalError
from .nn import PARAMETRIC_KINDS, Model, predict
from .setups import DetectionSetup

logger = logging.getLogger(__name__)

LID_MAX = 1e6
REFERENCE_COUNT = 100


def lid_mle(distances: np.ndarray, k: int, layer: str = "activations") -> float:
    """MLE of the local intrinsic dimension from distances to the reference points."""

    distances = np.sort(np.asarray(distances, dtype=np.float64).reshape(-1))
    if not 1 <= k <= len(distances):
        raise ValueError(f"k={k} needs between 1 and {len(distances)} reference distances")
    nearest = distances[:k]
    if nearest[-1] <= 0.0:
        raise NumericalError(f"LID undefined in layer {layer}: the {k} nearest references coincide with the sample")
    nearest = np.clip(nearest, sys.float_info.min, None)
    mean_log = float(np.mean(np.log(nearest / nearest[-1])))
    if mean_log == 0.0:
        return LID_MAX
    return float(min(-1.0 / mean_log, LID_MAX))


def layer_names(model: Model) -> List[str]:
    return [layer.name for layer in model.layers if layer.kind in PARAMETRIC_KINDS]


@dataclass
class LidReference:
    """Reference training images (and optionally their cached activations)."""

    k: int
    reference_ids: np.ndarray
    images: np.ndarray
    model_checksum: str
    layer_names: List[str]
    cache_activations: bool = False
    activations: Optional[List[np.ndarray]] = None

    @property
    def count(self) -> int:
        return len(self.reference_ids)

    def reference_activations(self, model: Model) -> List[np.ndarray]:
        if self.activations is not None:
            return self.activations
        return model.activations(self.images)

    def stored_values(self) -> int:
        """Values kept besides the head: raw images, or activations when cached."""

        if self.cache_activations and self.activations is not None:
            return int(sum(a.size for a in self.activations))
        return int(self.images.size)

    def to_doc(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "reference_ids": self.reference_ids.tolist(),
            "model_checksum": self.model_checksum,
            "layer_names": list(self.layer_names),
            "cache_activations": bool(self.cache_activations),
            "stored_values": self.stored_values(),
        }

    @classmethod
    def from_doc(cls, doc: Dict[str, Any], images: np.ndarray, model: Optional[Model] = None) -> "LidReference":
        ref = cls(
            k=int(doc["k"]),
            reference_ids=np.asarray(doc["reference_ids"], dtype=np.int64),
            images=images,
            model_checksum=doc["model_checksum"],
            layer_names=list(doc.get("layer_names", [])),
            cache_activations=bool(doc["cache_activations"]),
        )
        if ref.cache_activations and model is not None:
            ref.activations = model.activations(images)
        return ref


def build_lid_reference(
    model: Model,
    train: ImageDataset,
    k: int,
    seed: int,
    *,
    count: int = REFERENCE_COUNT,
    cache_activations: bool = False,
) -> LidReference:
    """Draw *count* correctly classified training images with a seeded RNG."""

    if not 1 <= k < count:
        raise ValueError(f"k must lie in [1, {count}), got {k}")
    _, predicted = predict(model, train.images)
    correct = np.flatnonzero(np.asarray(predicted) == train.labels)
    if len(correct) < count:
        raise EmptySetupError(f"only {len(correct)} correctly classified training images, {count} needed")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(correct, size=count, replace=False))
    ref = LidReference(
        k=k,
        reference_ids=train.ids[chosen],
        images=train.images[chosen].copy(),
        model_checksum=model.checksum(),
        layer_names=layer_names(model),
        cache_activations=cache_activations,
    )
    if cache_activations:
        ref.activations = model.activations(ref.images)
    logger.info("lid: %d reference images, k=%d, %d layers", count, k, len(ref.layer_names))
    return ref


class LidExtractor:
    """Per-layer LID features of single samples against a reference set.

    Without cached activations the references are pushed through the model
    again for every sample.
    """

    def __init__(self, model: Model, reference: LidReference) -> None:
        self.model = model
        self.reference = reference
        self.names = reference.layer_names or layer_names(model)
        self.timings: List[float] = []

    def features(self, x: np.ndarray) -> np.ndarray:
        started = time.perf_counter()
        sample = self.model.activations(x)
        refs = self.reference.reference_activations(self.model)
        values = np.empty(len(sample))
        for index, (query, ref, name) in enumerate(zip(sample, refs, self.names)):
            distances = cdist(query, ref, metric="euclidean")[0]
            values[index] = lid_mle(distances, self.reference.k, name)
        self.timings.append(time.perf_counter() - started)
        return values

    def extract(self, images: Sequence[np.ndarray]) -> np.ndarray:
        rows = [self.features(image) for image in images]
        if not rows:
            return np.zeros((0, len(self.names)))
        return np.stack(rows)


def extract_lid_features(model: Model, x: np.ndarray, reference: LidReference) -> np.ndarray:
    return LidExtractor(model, reference).features(x)


def extract_setup(model: Model, setup: DetectionSetup, reference: LidReference) -> tuple[FeatureSet, List[float]]:
    extractor = LidExtractor(model, reference)
    values = extractor.extract(setup.images)
    logger.info("lid: extracted %d x %d features for %s", values.shape[0], values.shape[1], setup.cause)
    features = FeatureSet(
        detector="lid",
        cause=setup.cause,
        values=values,
        labels=setup.labels,
        sample_ids=setup.sample_ids,
        partition=setup.partition,
        model_checksum=model.checksum(),
        feature_names=list(extractor.names),
        params={"k": reference.k, "reference_count": reference.count, "cache_activations": reference.cache_activations},
    )
    return features, extractor.timings
