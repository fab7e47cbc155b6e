from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .config import DatasetSpec, MixtureSpec, MnistSpec, TabularSpec
from .models import RngStream
from .tabular import TabularDist
from .utils import assert_exists

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    labels: Optional[np.ndarray] = None
    likelihood: str = "gaussian"
    meta: Dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def batch(self, size: int, rng: RngStream) -> np.ndarray:
        idx = rng.generator.integers(0, self.n, size=size)
        return self.x[idx]


def _read_bytes(path: Path) -> bytes:
    assert_exists(path, "IDX file")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DatasetFormatError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    expected = count * rows * cols
    body = raw[16:]
    if len(body) < expected:
        raise DatasetFormatError(f"{path}: truncated, header promises {expected} pixels, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=expected)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def read_idx_labels(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DatasetFormatError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    body = raw[8:]
    if len(body) < count:
        raise DatasetFormatError(f"{path}: truncated, header promises {count} labels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).astype(np.int64)


def load_mnist_idx(
    image_path: Path,
    label_path: Path,
    subset_fraction: float = 1.0,
    seed: int = 0,
    threshold: Optional[float] = 0.5,
) -> Dataset:
    """Parse an IDX image/label pair; ``threshold=None`` keeps grey levels in [0, 1]."""
    if not 0.0 < subset_fraction <= 1.0:
        raise ValueError(f"subset_fraction must lie in (0, 1], got {subset_fraction}")
    images = read_idx_images(Path(image_path))
    labels = read_idx_labels(Path(label_path))
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")

    n_total = images.shape[0]
    if subset_fraction < 1.0:
        keep = max(1, int(round(subset_fraction * n_total)))
        idx = np.sort(RngStream(seed, "data/subset").generator.choice(n_total, size=keep, replace=False))
        images, labels = images[idx], labels[idx]
    if threshold is not None:
        images = (images > threshold).astype(np.float64)
    logger.info("Loaded %d of %d MNIST examples from %s", images.shape[0], n_total, image_path)
    return Dataset(
        x=images,
        labels=labels,
        likelihood="bernoulli" if threshold is not None else "gaussian",
        meta={"source": str(image_path), "subset_fraction": subset_fraction, "total": n_total},
    )


def sample_mixture_2d(spec: MixtureSpec, n: int, rng: RngStream) -> np.ndarray:
    """Pick a component by weight, then draw isotropic Gaussian noise around its mean."""
    means = np.asarray(spec.means, dtype=np.float64)
    stds = np.asarray(spec.stds, dtype=np.float64)
    comp = rng.generator.choice(spec.n_modes, size=n, p=np.asarray(spec.weights))
    return means[comp] + stds[comp][:, None] * rng.normal((n, 2))


def sample_tabular(spec: TabularSpec, n: int, rng: RngStream, draws: Optional[RngStream] = None) -> Dataset:
    """One-hot draws from a Dirichlet(1) distribution over ``support_size`` states.

    ``rng`` fixes the distribution, ``draws`` (defaults to ``rng``) the samples.
    """
    dist = TabularDist(rng.generator.dirichlet(np.ones(spec.support_size)))
    states = dist.sample(n, (draws or rng).generator)
    return Dataset(
        x=np.eye(spec.support_size)[states],
        labels=states,
        likelihood="bernoulli",
        meta={"probs": dist.probs.tolist()},
    )


def build_dataset(spec: DatasetSpec, seed: int, n: int = 5000, split: str = "train") -> Dataset:
    rng = RngStream(seed, f"data/{split}")
    if spec.kind == "gaussian-mixture-2d":
        x = sample_mixture_2d(spec.mixture, n, rng)
        return Dataset(x=x, likelihood="gaussian", meta={"modes": spec.mixture.n_modes})
    if spec.kind == "mnist-idx":
        return _load_mnist(spec.mnist, seed, split)
    if spec.kind == "tabular-synthetic":
        return sample_tabular(spec.tabular, n, RngStream(seed, "data/tabular"), draws=rng)
    raise ValueError(f"Unknown dataset kind '{spec.kind}'")


def _load_mnist(spec: MnistSpec, seed: int, split: str) -> Dataset:
    threshold = spec.threshold if spec.binarize else None
    if split == "test" and spec.test_image_path:
        return load_mnist_idx(Path(spec.test_image_path), Path(spec.test_label_path), 1.0, seed, threshold)
    return load_mnist_idx(Path(spec.image_path), Path(spec.label_path), spec.subset_fraction, seed, threshold)
