"""Dataset ingestion: IDX containers, converters and the two-Gaussian toy set."""

from __future__ import annotations

import gzip
import logging
import os
import pickle
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import IdxFormatError, MissingArtifactError

logger = logging.getLogger(__name__)

# IDX type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dtype.kind + str(dtype.itemsize): code for code, dtype in IDX_TYPES.items()}


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    true_label: int
    id: int


@dataclass
class ImageDataset:
    """Images in ``[0, 1]`` with shape ``(N, H, W, C)``, integer labels and stable ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels) or len(self.images) != len(self.ids):
            raise ValueError("images, labels and ids must have equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> LabeledImage:
        return LabeledImage(self.images[index], int(self.labels[index]), int(self.ids[index]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for index in range(len(self)):
            yield self[index]

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices], self.ids[indices], self.name)

    def head(self, limit: Optional[int]) -> "ImageDataset":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))


def _open(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path: os.PathLike[str] | str) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a native-endian array."""

    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    with _open(path) as fh:
        payload = fh.read()
    if not payload:
        raise IdxFormatError(path, "empty file")
    if len(payload) < 4:
        raise IdxFormatError(path, "truncated header")
    zero, code, ndim = struct.unpack(">HBB", payload[:4])
    if zero != 0 or code not in IDX_TYPES or ndim == 0:
        raise IdxFormatError(path, f"bad magic number 0x{payload[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(payload) < header_len:
        raise IdxFormatError(path, "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", payload[4:header_len])
    dtype = IDX_TYPES[code]
    record_size = int(np.prod(dims[1:])) * dtype.itemsize if ndim > 1 else dtype.itemsize
    available = len(payload) - header_len
    expected = dims[0] * record_size
    if available < expected:
        found = available // record_size if record_size else 0
        raise IdxFormatError(path, f"truncated: header declares {dims[0]} records, found {found}")
    if available > expected:
        raise IdxFormatError(path, f"{available - expected} trailing bytes after {dims[0]} records")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)), offset=header_len)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: os.PathLike[str] | str, array: np.ndarray) -> None:
    array = np.asarray(array)
    big = array.dtype.newbyteorder(">")
    key = big.kind + str(big.itemsize)
    if key not in IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, IDX_CODES[key], array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.astype(big).tobytes())


def default_labels_path(images_path: str) -> str:
    """``train-images-idx3-ubyte`` -> ``train-labels-idx1-ubyte`` (MNIST naming)."""

    directory, base = os.path.split(images_path)
    if "images-idx3" in base:
        return os.path.join(directory, base.replace("images-idx3", "labels-idx1"))
    if "images" in base:
        return os.path.join(directory, base.replace("images", "labels"))
    raise IdxFormatError(images_path, "cannot derive the labels file name; pass it explicitly")


def load_idx_dataset(
    images_path: os.PathLike[str] | str,
    labels_path: os.PathLike[str] | str | None = None,
    *,
    name: str = "",
) -> ImageDataset:
    """Load an IDX image/label pair; 8-bit pixels are scaled to ``[0, 1]``."""

    images_path = os.fspath(images_path)
    labels_path = os.fspath(labels_path) if labels_path else default_labels_path(images_path)
    raw = read_idx(images_path)
    labels = read_idx(labels_path)
    if raw.ndim == 3:
        raw = raw[..., None]
    if raw.ndim != 4:
        raise IdxFormatError(images_path, f"expected 3 or 4 dimensions, got {raw.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, f"labels must be one-dimensional, got {labels.ndim} dimensions")
    if len(labels) != len(raw):
        raise IdxFormatError(labels_path, f"{len(labels)} labels for {len(raw)} images in {images_path}")
    if raw.dtype == np.uint8:
        images = raw.astype(np.float64) / 255.0
    else:
        images = raw.astype(np.float64)
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise IdxFormatError(images_path, "floating-point pixels must lie in [0, 1]")
    logger.info("loaded %d images of shape %s from %s", len(images), images.shape[1:], images_path)
    return ImageDataset(images, labels.astype(np.int64), np.arange(len(images), dtype=np.int64), name)


# ---------------------------------------------------------------- synthetic

TOY_CENTERS = (0.25, 0.75)
TOY_SPREAD = 0.05
BOUNDARY_BANDS = ((0.56, 0.60), (0.40, 0.44))


def make_two_gaussians(
    train_size: int,
    test_size: int,
    seed: int,
    *,
    boundary_fraction: float = 0.0,
) -> Tuple[ImageDataset, ImageDataset]:
    """Two well-separated Gaussian classes rendered as ``1x2x1`` images.

    Class 0 centres on ``(0.25, 0.5)``, class 1 on ``(0.75, 0.5)``.  With
    *boundary_fraction* > 0 that share of the test set is replaced by points
    lying just across the class boundary and carrying the opposite label, so a
    classifier misclassifies exactly those points.
    """

    rng = np.random.default_rng(seed)

    def draw(count: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, 2, size=count)
        x = np.array(TOY_CENTERS)[labels] + rng.normal(0.0, TOY_SPREAD, size=count)
        y = 0.5 + rng.normal(0.0, TOY_SPREAD, size=count)
        return np.stack([x, y], axis=1), labels

    train_points, train_labels = draw(train_size)
    boundary = int(round(boundary_fraction * test_size))
    test_points, test_labels = draw(test_size - boundary)
    if boundary:
        labels = rng.integers(0, 2, size=boundary)
        low = np.array([BOUNDARY_BANDS[int(c)][0] for c in labels])
        high = np.array([BOUNDARY_BANDS[int(c)][1] for c in labels])
        x = rng.uniform(low, high)
        y = 0.5 + rng.normal(0.0, TOY_SPREAD, size=boundary)
        test_points = np.concatenate([test_points, np.stack([x, y], axis=1)])
        test_labels = np.concatenate([test_labels, labels])

    def render(points: np.ndarray, labels: np.ndarray, offset: int, name: str) -> ImageDataset:
        images = np.clip(points, 0.0, 1.0).reshape(len(points), 1, 2, 1)
        ids = np.arange(offset, offset + len(points), dtype=np.int64)
        return ImageDataset(images, labels.astype(np.int64), ids, name)

    return (
        render(train_points, train_labels, 0, "two-gaussians-train"),
        render(test_points, test_labels, 0, "two-gaussians-test"),
    )


# --------------------------------------------------------------- converters


def convert_cifar10(batch_paths: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Read CIFAR-10 python pickle batches into ``uint8`` NHWC images and labels."""

    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in batch_paths:
        if not os.path.exists(path):
            raise MissingArtifactError(path)
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        data = np.asarray(batch[b"data"], dtype=np.uint8)
        images.append(data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(np.asarray(batch[b"labels"], dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def convert_svhn(mat_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Read an SVHN ``.mat`` split; label 10 denotes digit 0."""

    from scipy.io import loadmat

    if not os.path.exists(mat_path):
        raise MissingArtifactError(mat_path)
    payload = loadmat(mat_path)
    images = np.asarray(payload["X"], dtype=np.uint8).transpose(3, 0, 1, 2)
    labels = np.asarray(payload["y"], dtype=np.int64).reshape(-1) % 10
    return images, labels.astype(np.uint8)


def write_idx_dataset(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: Optional[str] = None) -> Tuple[str, str]:
    labels_path = labels_path or default_labels_path(images_path)
    write_idx(images_path, images)
    write_idx(labels_path, labels)
    return images_path, labels_path
