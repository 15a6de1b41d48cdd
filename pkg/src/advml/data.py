"""Synthetic datasets, splitting, batching, normalization and integrity hashing."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CLEAN = "clean"
FLIPPED = "flipped"
NOISE_POISONED = "noise_poisoned"
TRIGGERED = "triggered"
FLAG_KINDS = (CLEAN, FLIPPED, NOISE_POISONED, TRIGGERED)

DATA_FORMAT = "advml-data-v1"
HASH_TAG = b"advml-data-v1\x00"


class IntegrityError(RuntimeError):
    """Dataset digest does not match the expected value."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    grid: tuple[int, int] | None = None
    flags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1) if self.features.size else np.zeros((0, 0))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.flags is None:
            self.flags = np.array([CLEAN] * n, dtype=object)
        else:
            self.flags = np.asarray(list(self.flags), dtype=object)
        if self.labels.shape[0] != n or self.flags.shape[0] != n:
            raise ValueError("features, labels and flags must have the same number of rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.grid is not None:
            self.grid = (int(self.grid[0]), int(self.grid[1]))
            if self.grid[0] * self.grid[1] != self.features.shape[1]:
                raise ValueError(f"grid {self.grid} does not match {self.features.shape[1]} features")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.num_classes,
                       self.grid, self.flags[idx].copy())

    def copy(self) -> "Dataset":
        return self.subset(np.arange(self.n))

    def with_(self, **changes) -> "Dataset":
        return replace(self, **changes)

    def poisoned_mask(self) -> np.ndarray:
        """Rows whose provenance is anything but clean."""
        return np.array([base_flag(f) != CLEAN for f in self.flags], dtype=bool)

    def images(self) -> np.ndarray:
        if self.grid is None:
            raise ValueError("dataset has no grid shape")
        return self.features.reshape(self.n, *self.grid)


def base_flag(flag: str) -> str:
    return str(flag).split("+", 1)[0]


def concat(parts: Sequence[Dataset]) -> Dataset:
    first = parts[0]
    return Dataset(np.vstack([p.features for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   max(p.num_classes for p in parts), first.grid,
                   np.concatenate([p.flags for p in parts]))


# ---------------------------------------------------------------- generators


def gen_two_gaussians(n_per_class: int, rng: np.random.Generator, center_offset: float = 1.0,
                      std: float = 1.0) -> Dataset:
    """Two isotropic 2-D Gaussian blobs at ``-offset*(1,1)`` and ``+offset*(1,1)``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if std <= 0:
        raise ValueError("std must be positive")
    c0 = rng.standard_normal((n_per_class, 2)) * std - center_offset
    c1 = rng.standard_normal((n_per_class, 2)) * std + center_offset
    X = np.vstack([c0, c1])
    y = np.repeat([0, 1], n_per_class)
    return Dataset(X, y, 2)


def gen_shifted_vectors(n_per_class: int, dim: int, rng: np.random.Generator,
                        shift: float = 1.0) -> Dataset:
    """Benign rows ~ N(0, I); class 1 ("malicious") rows shifted by ``+shift``."""
    benign = rng.standard_normal((n_per_class, dim))
    malicious = rng.standard_normal((n_per_class, dim)) + shift
    return Dataset(np.vstack([benign, malicious]), np.repeat([0, 1], n_per_class), 2)


def class_template(c: int, height: int, width: int) -> np.ndarray:
    """Binary ``(height, width)`` template for class ``c``.

    Bits come from SHA-256 of ``"advml-template:<c>:<h>x<w>"`` extended by a
    block counter, so templates need no assets and are the same everywhere.
    """
    need = height * width
    bits: list[int] = []
    block = 0
    while len(bits) < need:
        digest = hashlib.sha256(f"advml-template:{c}:{height}x{width}:{block}".encode()).digest()
        for byte in digest:
            bits.extend((byte >> k) & 1 for k in range(8))
        block += 1
    return np.array(bits[:need], dtype=float).reshape(height, width)


def grid_templates(k_classes: int, height: int, width: int) -> np.ndarray:
    if height < 4 or width < 4:
        raise ValueError("grid must be at least 4x4")
    if k_classes < 2:
        raise ValueError("need at least two classes")
    t = np.stack([class_template(c, height, width).reshape(-1) for c in range(k_classes)])
    min_diff = math.ceil(0.25 * height * width)
    for a in range(k_classes):
        for b in range(a + 1, k_classes):
            if np.sum(t[a] != t[b]) < min_diff:
                raise ValueError(f"grid {height}x{width} too small for {k_classes} distinct templates")
    return t


def gen_grid_classes(n_per_class: int, k_classes: int, rng: np.random.Generator, height: int = 8,
                     width: int = 8, noise_std: float = 0.15, amplitude: float = 0.8,
                     clip_high: float = 1.0) -> Dataset:
    """Noisy copies of per-class binary templates, clamped to ``[0, clip_high]``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    templates = grid_templates(k_classes, height, width)
    y = np.repeat(np.arange(k_classes), n_per_class)
    X = amplitude * templates[y] + rng.standard_normal((y.size, height * width)) * noise_std
    X = np.clip(X, 0.0, clip_high)
    return Dataset(X, y, k_classes, (height, width))


# ---------------------------------------------------------------- splitting / batching


def train_test_split(dataset: Dataset, test_fraction: float, rng: np.random.Generator):
    """Stratified split; each class contributes ``round(fraction * count)`` test rows."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == c)
        if rows.size == 0:
            continue
        if rows.size < 2:
            raise ValueError(f"class {c} has fewer than 2 rows")
        rows = rows[rng.permutation(rows.size)]
        k = int(round(test_fraction * rows.size))
        k = min(max(k, 1), rows.size - 1)
        test_idx.append(rows[:k])
        train_idx.append(rows[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return dataset.subset(tr), dataset.subset(te)


def minibatches(dataset: Dataset, batch_size: int, shuffle: bool = False,
                rng: np.random.Generator | None = None) -> list[Dataset]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle and rng is None:
        raise ValueError("shuffling needs an rng")
    order = rng.permutation(dataset.n) if shuffle else np.arange(dataset.n)
    return [dataset.subset(order[i:i + batch_size]) for i in range(0, dataset.n, batch_size)]


def normalize(dataset: Dataset, mean: float = 0.5, std: float = 0.5) -> Dataset:
    if std == 0:
        raise ValueError("std must be non-zero")
    return dataset.with_(features=(dataset.features - mean) / std)


def denormalize(dataset: Dataset, mean: float = 0.5, std: float = 0.5) -> Dataset:
    if std == 0:
        raise ValueError("std must be non-zero")
    return dataset.with_(features=dataset.features * std + mean)


# ---------------------------------------------------------------- integrity


def canonical_bytes(dataset: Dataset) -> bytes:
    """Byte layout hashed by :func:`dataset_sha256`.

    ``b"advml-data-v1\\0"``, then n, d, num_classes as little-endian uint64,
    then labels as little-endian int64, then features row-major as
    little-endian IEEE-754 doubles. Flags and grid shape are not covered.
    """
    header = HASH_TAG + struct.pack("<QQQ", dataset.n, dataset.d, dataset.num_classes)
    labels = dataset.labels.astype("<i8").tobytes()
    feats = np.ascontiguousarray(dataset.features, dtype="<f8").tobytes()
    return header + labels + feats


def dataset_sha256(dataset: Dataset) -> str:
    return hashlib.sha256(canonical_bytes(dataset)).hexdigest()


def verify_dataset(dataset: Dataset, expected: str) -> None:
    actual = dataset_sha256(dataset)
    if actual != expected.lower():
        raise IntegrityError(f"data integrity compromised: expected {expected}, got {actual}")


# ---------------------------------------------------------------- files


def dataset_to_json(dataset: Dataset) -> dict:
    return {
        "format": DATA_FORMAT,
        "n": dataset.n,
        "d": dataset.d,
        "num_classes": dataset.num_classes,
        "grid": list(dataset.grid) if dataset.grid else None,
        "features": [float(v) for v in dataset.features.reshape(-1)],
        "labels": [int(v) for v in dataset.labels],
        "flags": [str(f) for f in dataset.flags],
    }


def dataset_from_json(doc: dict) -> Dataset:
    if doc.get("format") != DATA_FORMAT:
        raise ValueError(f"unsupported dataset format {doc.get('format')!r}")
    n, d = int(doc["n"]), int(doc["d"])
    feats = np.asarray(doc["features"], dtype=float)
    if feats.size != n * d:
        raise ValueError(f"expected {n * d} feature values, found {feats.size}")
    grid = tuple(doc["grid"]) if doc.get("grid") else None
    return Dataset(feats.reshape(n, d), doc["labels"], int(doc["num_classes"]), grid,
                   doc.get("flags"))


def save_dataset(dataset: Dataset, path) -> None:
    # repr of a float round-trips exactly
    Path(path).write_text(json.dumps(dataset_to_json(dataset)))


def load_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed dataset file ({exc})") from exc
    return dataset_from_json(doc)


def write_pgm(image: np.ndarray, path) -> None:
    """Binary greyscale PGM (P5, maxval 255) of an image with values in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    pixels = np.round(255 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    # header: magic, width, height, maxval, then exactly one whitespace byte
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    body = raw[pos + 1: pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / maxval


def dump_pgms(dataset: Dataset, directory, limit: int | None = None) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    imgs = dataset.images()
    for i in range(dataset.n if limit is None else min(limit, dataset.n)):
        p = out / f"{i:05d}_y{dataset.labels[i]}_{base_flag(dataset.flags[i])}.pgm"
        write_pgm(imgs[i], p)
        paths.append(p)
    return paths
