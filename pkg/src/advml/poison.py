"""Training-time corruption: label flips, noisy injections, backdoor triggers,
gradient sabotage, and the max-pixel trigger filter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FLIPPED, NOISE_POISONED, TRIGGERED, Dataset
from .nn import GradientBundle, predict


@dataclass(frozen=True)
class Trigger:
    """Solid square stamped into the bottom-right corner of an image."""

    size: int = 3
    value: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("trigger size must be >= 1")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("trigger value must lie in [0, 1]")


def _exact_selection(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    k = math.floor(fraction * n)
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], dtype=np.int64)


def flip_labels(dataset: Dataset, fraction: float, rng: np.random.Generator,
                rule: str | tuple[int, int] = "binary_swap") -> Dataset:
    """Flip labels on exactly ``floor(fraction * N)`` uniformly chosen rows.

    ``rule="binary_swap"`` maps y to 1 - y; a pair ``(a, b)`` swaps a and b and
    leaves selected rows with any other label alone. Only rows whose label
    actually changed are flagged.
    """
    if rule == "binary_swap":
        if dataset.num_classes != 2:
            raise ValueError("binary_swap needs a binary dataset")
    else:
        a, b = rule
        if not (0 <= a < dataset.num_classes and 0 <= b < dataset.num_classes) or a == b:
            raise ValueError(f"invalid label pair {rule}")
    out = dataset.copy()
    rows = _exact_selection(dataset.n, fraction, rng)
    y = out.labels[rows]
    if rule == "binary_swap":
        new = 1 - y
    else:
        new = np.where(y == a, b, np.where(y == b, a, y))
    changed = rows[new != y]
    out.labels[rows] = new
    out.flags[changed] = FLIPPED
    return out


def noise_flip_inject(dataset: Dataset, count: int, rng: np.random.Generator,
                      noise_scale: float = 0.5) -> Dataset:
    """Add ``U[0,1) * noise_scale`` to ``count`` random rows, clamp, and flip their labels."""
    if not 0 <= count <= dataset.n:
        raise ValueError(f"count must lie in [0, {dataset.n}]")
    out = dataset.copy()
    if count == 0:
        return out
    rows = np.sort(rng.choice(dataset.n, size=count, replace=False))
    noise = rng.random((count, dataset.d)) * noise_scale
    out.features[rows] = np.clip(out.features[rows] + noise, 0.0, 1.0)
    if dataset.num_classes == 2:
        out.labels[rows] = 1 - out.labels[rows]
    else:
        # multi-class: move to a different class chosen uniformly
        shift = rng.integers(1, dataset.num_classes, size=count)
        out.labels[rows] = (out.labels[rows] + shift) % dataset.num_classes
    out.flags[rows] = NOISE_POISONED
    return out


def stamp_trigger(image_row, grid: tuple[int, int] | None, trigger: Trigger = Trigger()) -> np.ndarray:
    """Return a copy of one flattened image (or a batch) with the trigger stamped."""
    if grid is None:
        raise ValueError("stamping needs the image grid shape")
    h, w = grid
    if trigger.size > min(h, w):
        raise ValueError(f"trigger size {trigger.size} exceeds grid {grid}")
    X = np.array(image_row, dtype=float)
    single = X.ndim == 1
    X = X.reshape(-1, h, w)
    X[:, h - trigger.size:, w - trigger.size:] = trigger.value
    X = X.reshape(-1, h * w)
    return X[0] if single else X


def backdoor_poison(dataset: Dataset, rng: np.random.Generator, fraction: float = 0.1,
                    target_label: int = 0, trigger: Trigger = Trigger()) -> Dataset:
    if not 0 <= target_label < dataset.num_classes:
        raise ValueError(f"target label {target_label} out of range")
    rows = _exact_selection(dataset.n, fraction, rng)
    out = dataset.copy()
    if rows.size:
        out.features[rows] = stamp_trigger(out.features[rows], dataset.grid, trigger)
        out.labels[rows] = target_label
        out.flags[rows] = TRIGGERED
    return out


def poison_gradient_update(grads: GradientBundle, rng: np.random.Generator,
                           mode: str = "replace_uniform", sigma: float = 1.0) -> GradientBundle:
    """Sabotage parameter gradients; the input gradient passes through untouched."""
    if mode == "replace_uniform":
        new = lambda g: rng.random(g.shape)  # noqa: E731
    elif mode == "add_gaussian":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        new = lambda g: g + rng.standard_normal(g.shape) * sigma  # noqa: E731
    else:
        raise ValueError(f"unknown gradient poisoning mode {mode!r}")
    return GradientBundle([new(g) for g in grads.weight_grads],
                          [new(g) for g in grads.bias_grads],
                          grads.input_grad.copy())


@dataclass
class RemovalReport:
    removed: np.ndarray
    kept: np.ndarray
    precision: float
    recall: float


def precision_recall(flagged: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Precision and recall of a boolean flag vector; an empty denominator scores 1.0."""
    tp = int(np.sum(flagged & truth))
    precision = tp / int(flagged.sum()) if flagged.any() else 1.0
    recall = tp / int(truth.sum()) if truth.any() else 1.0
    return precision, recall


def filter_triggered(dataset: Dataset, trigger_value: float = 1.0) -> tuple[Dataset, RemovalReport]:
    """Drop rows whose brightest pixel equals ``trigger_value`` exactly.

    Clean rows that happen to saturate at the same value are removed too; the
    report's precision shows how many.
    """
    flagged = dataset.features.max(axis=1) == trigger_value if dataset.n else np.zeros(0, bool)
    truth = np.array([str(f).startswith(TRIGGERED) for f in dataset.flags], dtype=bool)
    precision, recall = precision_recall(flagged, truth)
    kept = np.flatnonzero(~flagged)
    report = RemovalReport(np.flatnonzero(flagged), kept, precision, recall)
    return dataset.subset(kept), report


def attack_success_rate(model, clean: Dataset, target_label: int = 0,
                        trigger: Trigger = Trigger()) -> float:
    """Fraction of non-target test rows sent to ``target_label`` once triggered."""
    rows = clean.labels != target_label
    X = stamp_trigger(clean.features[rows], clean.grid, trigger)
    return float(np.mean(predict(model, X) == target_label))
