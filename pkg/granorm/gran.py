"""Gradient-norm features.

For an input ``x`` the model predicts ``y = argmax F(x)``.  The input is then
smoothed with a Gaussian kernel and the loss ``L(F(x_smooth), y)`` is
backpropagated to the parameters.  Each parameter tensor contributes the L1
norm of its gradient, giving one feature per tensor in stable parameter
order.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .autodiff import Tensor
from .detector import FeatureSet
from .nn import Model, cross_entropy_loss, predict
from .setups import DetectionSetup

logger = logging.getLogger(__name__)

SIGMA_IDENTITY = 1e-6


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1D Gaussian with radius ``ceil(3 sigma)``, normalised to sum 1."""

    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over height and width of ``(H, W, C)`` or ``(N, H, W, C)`` images.

    Borders reflect.  ``sigma`` below ``1e-6`` returns a copy of *x*.
    """

    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma < SIGMA_IDENTITY:
        return x.copy()
    kernel = gaussian_kernel(sigma)
    height_axis = x.ndim - 3
    out = correlate1d(x, kernel, axis=height_axis, mode="reflect")
    return correlate1d(out, kernel, axis=height_axis + 1, mode="reflect")


@dataclass
class GranFeatures:
    values: np.ndarray
    sample_id: Optional[int] = None
    sigma: float = 0.0
    predicted: Optional[int] = None


class GranExtractor:
    """Computes GraN features for one frozen model.

    ``forward_passes`` and ``backward_passes`` count the work done; each
    sample costs one untaped forward pass on ``x`` and one taped forward and
    backward pass on the smoothed input.
    """

    def __init__(self, model: Model, sigma: float) -> None:
        self.model = model
        self.sigma = float(sigma)
        self.params = [tensor for _, tensor in model.parameters()]
        self.forward_passes = 0
        self.backward_passes = 0
        self.timings: List[float] = []
        self.last_tape: Optional[ad.Tape] = None

    @property
    def feature_names(self) -> List[str]:
        return self.model.parameter_names()

    def features(self, x: np.ndarray, sample_id: Optional[int] = None) -> GranFeatures:
        started = time.perf_counter()
        _, y = predict(self.model, x)
        self.forward_passes += 1
        smoothed = gaussian_smooth(x, self.sigma)
        with ad.Tape() as tape:
            output = self.model.forward(Tensor(smoothed[None, ...]))
            loss = cross_entropy_loss(self.model, output, [y], reduction="sum")
        grads = ad.gradients(tape, loss, self.params)
        self.forward_passes += 1
        self.backward_passes += 1
        self.last_tape = tape
        values = np.array([np.abs(g).sum() for g in grads], dtype=np.float64)
        self.timings.append(time.perf_counter() - started)
        return GranFeatures(values, sample_id, self.sigma, int(y))

    def extract(self, images: np.ndarray, sample_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """Feature matrix ``(N, n)``; samples are processed one at a time."""

        ids = list(sample_ids) if sample_ids is not None else [None] * len(images)
        rows = [self.features(image, sid).values for image, sid in zip(images, ids)]
        if not rows:
            return np.zeros((0, len(self.params)))
        return np.stack(rows)


def extract_gran_features(model: Model, x: np.ndarray, sigma: float, sample_id: Optional[int] = None) -> GranFeatures:
    return GranExtractor(model, sigma).features(x, sample_id)


def extract_setup(model: Model, setup: DetectionSetup, sigma: float) -> tuple[FeatureSet, List[float]]:
    """GraN features for every sample of *setup*, plus per-sample wall times."""

    extractor = GranExtractor(model, sigma)
    values = extractor.extract(setup.images, setup.sample_ids)
    logger.info("gran: extracted %d x %d features for %s", values.shape[0], values.shape[1], setup.cause)
    features = FeatureSet(
        detector="gran",
        cause=setup.cause,
        values=values,
        labels=setup.labels,
        sample_ids=setup.sample_ids,
        partition=setup.partition,
        model_checksum=model.checksum(),
        feature_names=extractor.feature_names,
        params={"sigma": float(sigma)},
    )
    return features, extractor.timings


def total_norm(values: np.ndarray) -> np.ndarray | float:
    """Summed gradient norm per sample, a single-feature score."""

    summed = np.asarray(values, dtype=np.float64).sum(axis=-1)
    return float(summed) if np.ndim(summed) == 0 else summed
