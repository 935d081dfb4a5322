"""Datasets: IDX files, the bundled MNIST sample, synthetic Gaussian classes, sharding."""

from __future__ import annotations

import functools
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import ConfigError, IdxParseError

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049

PathLike = Union[str, Path]


@dataclass
class LabeledDataset:
    """Feature matrix plus integer labels in ``[0, n_classes)``."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.n_classes)


@dataclass(frozen=True)
class ShardPlan:
    """Disjoint, equal-sized index lists, one per agent."""

    shards: Tuple[np.ndarray, ...]

    @property
    def n_agents(self) -> int:
        return len(self.shards)


# ---------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, path: PathLike, expected_magic: int, ndims: int) -> List[int]:
    need = 4 * (1 + ndims)
    if len(buf) < 4:
        raise IdxParseError("magic", f"{path}: file too short to hold a magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxParseError("magic", f"{path}: bad magic {magic} (expected {expected_magic})")
    if len(buf) < need:
        raise IdxParseError("dims", f"{path}: truncated header")
    return list(struct.unpack(f">{ndims}I", buf[4:need]))


def _read_idx(path: PathLike, magic: int, ndims: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    dims = _read_header(buf, path, magic, ndims)
    body = buf[4 * (1 + ndims):]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise IdxParseError("data", f"{path}: truncated data, {len(body)} of {expected} bytes present")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, n_classes: int = 10) -> LabeledDataset:
    """Read an uncompressed IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxParseError("count", f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= n_classes:
        raise IdxParseError("data", f"{labels_path}: label {labels.max()} outside [0, {n_classes})")
    n, rows, cols = images.shape
    return LabeledDataset(images.reshape(n, rows * cols) / 255.0, labels.astype(np.int64), n_classes)


def write_idx(dataset: LabeledDataset, images_path: PathLike, labels_path: PathLike,
              rows: int = 28, cols: int = 28) -> None:
    """Write a dataset in IDX layout, quantizing features to bytes (``round(255 x)``)."""
    n = len(dataset)
    pixels = np.clip(np.rint(dataset.features.reshape(n, -1) * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[1] != rows * cols:
        raise ValueError(f"feature dim {pixels.shape[1]} is not {rows}x{cols}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# bundled MNIST sample


@functools.lru_cache(maxsize=1)
def _mnist_sample_arrays() -> Tuple[np.ndarray, np.ndarray]:
    from importlib.resources import files

    path = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    with path.open("rb") as raw, gzip.open(raw, "rt") as text:
        table = np.loadtxt(text, delimiter=",", dtype=np.float64)
    return table[:, :-1] / 255.0, table[:, -1].astype(np.int64)


def load_mnist_sample() -> LabeledDataset:
    """5,000 real MNIST digits (500 per class) shipped inside ``mlxtend``."""
    features, labels = _mnist_sample_arrays()
    return LabeledDataset(features.copy(), labels.copy(), 10)


# ---------------------------------------------------------------------------
# synthetic


def synth_dataset(classes: int, per_class: int, dim: int, noise_sd: float, seed: int) -> LabeledDataset:
    """Gaussian blobs around fixed unit-norm class means.

    Examples are emitted class by class; shuffle or partition downstream.
    """
    if classes < 1 or per_class < 1 or dim < 1:
        raise ConfigError("classes, per_class and dim must all be positive")
    if noise_sd < 0:
        raise ConfigError(f"noise_sd must be non-negative, got {noise_sd}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(size=(classes * per_class, dim))
    return LabeledDataset(means[labels] + noise_sd * noise, labels, classes)


# ---------------------------------------------------------------------------
# splitting


def stratified_split(dataset: LabeledDataset, train_size: int, test_size: int,
                     rng: np.random.Generator) -> Tuple[LabeledDataset, LabeledDataset]:
    """Disjoint class-balanced train/test subsets.

    Each class is shuffled, then classes are interleaved round-robin; the first
    ``test_size`` examples of that ordering form the test set and the next
    ``train_size`` the training set.
    """
    if train_size + test_size > len(dataset):
        raise ConfigError(
            f"train_size + test_size = {train_size + test_size} exceeds the {len(dataset)} available examples"
        )
    per_class = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(dataset.n_classes)]
    depth = max((len(p) for p in per_class), default=0)
    padded = np.full((depth, dataset.n_classes), -1, dtype=np.int64)
    for c, idx in enumerate(per_class):
        padded[:len(idx), c] = idx
    order = padded.ravel()
    order = order[order >= 0]
    test = order[:test_size]
    train = order[test_size:test_size + train_size]
    return dataset.subset(train), dataset.subset(test)


def partition(dataset: LabeledDataset, n_agents: int, seed) -> ShardPlan:
    """Random permutation split into ``n_agents`` equal blocks; the remainder is dropped."""
    if n_agents < 1:
        raise ConfigError(f"number of agents must be >= 1, got {n_agents}")
    if n_agents > len(dataset):
        raise ConfigError(f"cannot split {len(dataset)} examples among {n_agents} agents")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    size = len(dataset) // n_agents
    return ShardPlan(tuple(order[i * size:(i + 1) * size] for i in range(n_agents)))
