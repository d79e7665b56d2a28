"""Datasets: CSV ingestion, synthetic generators, image reduction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise DataError("features must be normalized to [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.name)


def minmax(features: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling to [0, 1]; constant columns become 0."""
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    out = np.zeros_like(features, dtype=float)
    ok = span > 0
    out[:, ok] = (features[:, ok] - lo[ok]) / span[ok]
    return out


def load_csv(path, name: str | None = None) -> Dataset:
    """Read ``label,f0,f1,...`` rows and min-max normalize every feature."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not header or header[0].strip() != "label":
        raise DataError(f"{path}: header must start with 'label'")
    if not body:
        raise DataError(f"{path}: no data rows")
    width = len(header)
    labels = np.empty(len(body), dtype=int)
    feats = np.empty((len(body), width - 1))
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != width:
            raise DataError(f"{path}:{line}: expected {width} cells, got {len(row)}")
        try:
            labels[r] = int(row[0])
        except ValueError:
            raise DataError(f"{path}:{line}: column 'label': not an integer: {row[0]!r}") from None
        for c, cell in enumerate(row[1:], start=1):
            try:
                feats[r, c - 1] = float(cell)
            except ValueError:
                raise DataError(f"{path}:{line}: column {header[c]!r}: not a number: {cell!r}") from None
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite feature values")
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return Dataset(minmax(feats), labels, int(labels.max()) + 1, name or path.stem)


def _spread_centers(num: int, dim: int, rng, lo=0.15, hi=0.85, tries=1000) -> np.ndarray:
    target = 0.5 * (hi - lo) / max(1.0, (num - 1) ** (1.0 / dim))
    best, best_gap = None, -1.0
    for _ in range(tries):
        c = rng.uniform(lo, hi, size=(num, dim))
        diff = c[:, None, :] - c[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1)) + np.eye(num) * 1e9
        gap = dist.min()
        if gap > best_gap:
            best, best_gap = c, gap
        if gap >= target:
            break
    return best


def synth_blobs(n_per_class: int, num_classes: int, dim: int, spread: float, rng) -> Dataset:
    """Gaussian blobs around well-separated centres, clipped to [0, 1]."""
    if num_classes < 2 or dim < 1:
        raise DataError("need at least 2 classes and 1 feature")
    centers = _spread_centers(num_classes, dim, rng)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    feats = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(feats[order], 0, 1), labels[order], num_classes, "blobs")


def synth_patterns(n_per_class: int, num_classes: int, side: int, spread: float, rng) -> Dataset:
    """Noisy copies of random ``side x side`` class templates.

    Templates are independent uniform images, so class information lives at
    every scale and coarser downsampling discards some of it.
    """
    if num_classes < 2 or side < 1:
        raise DataError("need at least 2 classes and side >= 1")
    templates = rng.uniform(0, 1, size=(num_classes, side * side))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    feats = templates[labels] + spread * rng.standard_normal((labels.size, side * side))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(feats[order], 0, 1), labels[order], num_classes, "patterns")


def downsample_image(pixels, in_side: int, out_side: int, grayscale: bool = True, channels: int = 1) -> np.ndarray:
    """Average-pool flat channel-major images (``channels x side x side``).

    Works on one image or a batch (leading axes). With ``grayscale`` the
    channels are averaged first and the output has ``out_side**2`` values.
    """
    if out_side < 1 or in_side % out_side:
        raise DataError(f"cannot pool a {in_side}-pixel side down to {out_side}")
    px = np.asarray(pixels, dtype=float)
    lead = px.shape[:-1]
    if px.shape[-1] != channels * in_side * in_side:
        raise DataError(f"expected {channels * in_side * in_side} pixels, got {px.shape[-1]}")
    img = px.reshape(lead + (channels, in_side, in_side))
    if grayscale:
        img = img.mean(axis=-3, keepdims=True)
    f = in_side // out_side
    pooled = img.reshape(img.shape[:-2] + (out_side, f, out_side, f)).mean(axis=(-3, -1))
    return pooled.reshape(lead + (-1,))


def hflip(pixels, side: int, channels: int = 1) -> np.ndarray:
    px = np.asarray(pixels, dtype=float)
    lead = px.shape[:-1]
    img = px.reshape(lead + (channels, side, side))[..., ::-1]
    return img.reshape(lead + (-1,))


def auto_side(side: int, capacity: int) -> int:
    """Largest divisor ``s`` of ``side`` with ``s * s <= capacity``."""
    best = 1
    for s in range(1, side + 1):
        if side % s == 0 and s * s <= capacity:
            best = s
    return best


def train_test_split(ds: Dataset, test_fraction: float, rng) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps at least one training example."""
    if not 0 <= test_fraction < 1:
        raise DataError("test_fraction must be in [0, 1)")
    train, test = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        k = min(int(math.floor(test_fraction * idx.size + 0.5)), max(idx.size - 1, 0))
        test.append(idx[:k])
        train.append(idx[k:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    if te.size == 0:
        te = tr
    return ds.subset(tr), ds.subset(te)
