"""Training- and data-side defenses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, base_flag
from .evasion import fgsm
from .nn import (GradientBundle, Loss, MlpModel, TrainConfig, TrainReport, batch_slices,
                 hidden_activations, loss_and_grads, predict, train)
from .poison import precision_recall


# ---------------------------------------------------------------- adversarial training


def adversarial_train_epoch(model, dataset: Dataset, eps: float, cfg: TrainConfig, optimizer,
                            rng: np.random.Generator) -> float:
    """One epoch of a clean step followed by an FGSM step on every batch.

    The FGSM batch is crafted against the model as updated by the clean step.
    Returns the mean adversarial loss over the epoch.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    X, y = dataset.features, dataset.labels
    total = 0.0
    for idx in batch_slices(dataset.n, cfg.batch_size, cfg.shuffle, rng):
        _, grads = loss_and_grads(model, X[idx], y[idx], cfg.loss, cfg.beta)
        optimizer.step(model, grads)
        X_adv = fgsm(model, X[idx], y[idx], eps)
        value, grads = loss_and_grads(model, X_adv, y[idx], cfg.loss, cfg.beta)
        optimizer.step(model, grads)
        total += value * len(idx)
    return total / dataset.n


def adversarial_train(model, dataset: Dataset, eps: float, cfg: TrainConfig) -> TrainReport:
    opt = cfg.make_optimizer()
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    for _ in range(cfg.epochs):
        report.epoch_losses.append(adversarial_train_epoch(model, dataset, eps, cfg, opt, rng))
    return report


def noise_augment(X, noise_factor: float, rng: np.random.Generator) -> np.ndarray:
    if noise_factor < 0:
        raise ValueError("noise_factor must be non-negative")
    X = np.asarray(X, dtype=float)
    return np.clip(X + rng.standard_normal(X.shape) * noise_factor, 0.0, 1.0)


# ---------------------------------------------------------------- gradient masking


class InputGradientMask:
    """Wraps a model so its forward pass is unchanged but the reported input
    gradient is always zero. Parameter gradients are left alone."""

    def __init__(self, model: MlpModel):
        self.model = model

    @property
    def n_inputs(self) -> int:
        return self.model.n_inputs

    @property
    def n_outputs(self) -> int:
        return self.model.n_outputs

    def params(self):
        return self.model.params()

    def forward(self, X):
        return self.model.forward(X)

    def backward(self, cache, targets, loss=Loss.CROSS_ENTROPY, **kw):
        return self._mask(self.model.backward(cache, targets, loss, **kw))

    def backward_from_output(self, cache, grad_out):
        return self._mask(self.model.backward_from_output(cache, grad_out))

    @staticmethod
    def _mask(g: GradientBundle) -> GradientBundle:
        return GradientBundle(g.weight_grads, g.bias_grads, np.zeros_like(g.input_grad))


def mask_input_gradient(model: MlpModel) -> InputGradientMask:
    return InputGradientMask(model)


# ---------------------------------------------------------------- sanitization


@dataclass
class AuditReport:
    suspects: np.ndarray
    evidence: np.ndarray | None = None
    kept: np.ndarray | None = None
    precision: float | None = None
    recall: float | None = None

    @property
    def count(self) -> int:
        return int(self.suspects.size)


def _score(mask: np.ndarray, dataset: Dataset) -> tuple[float | None, float | None]:
    truth = dataset.poisoned_mask()
    if not truth.any():
        return None, None
    return precision_recall(mask, truth)


def _removal(dataset: Dataset, removed_mask: np.ndarray, evidence=None):
    p, r = _score(removed_mask, dataset)
    kept = np.flatnonzero(~removed_mask)
    report = AuditReport(np.flatnonzero(removed_mask), evidence, kept, p, r)
    return dataset.subset(kept), report


def sanitize_outliers(dataset: Dataset, mode: str = "std_k", k: float = 3.0,
                      threshold: float = 1.5) -> tuple[Dataset, AuditReport]:
    """Drop feature outliers.

    ``std_k``: any feature more than ``k`` population standard deviations from
    its column mean. ``centroid``: Euclidean distance to the row's own class
    mean above ``threshold``.
    """
    X = dataset.features
    if mode == "std_k":
        if k <= 0:
            raise ValueError("k must be positive")
        dev = np.abs(X - X.mean(axis=0))
        removed = (dev > k * X.std(axis=0)).any(axis=1)
        return _removal(dataset, removed)
    if mode == "centroid":
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        dist = np.zeros(dataset.n)
        for c in np.unique(dataset.labels):
            rows = dataset.labels == c
            dist[rows] = np.linalg.norm(X[rows] - X[rows].mean(axis=0), axis=1)
        return _removal(dataset, dist > threshold, dist)
    raise ValueError(f"unknown sanitization mode {mode!r}")


# ---------------------------------------------------------------- differential privacy


@dataclass
class DpConfig:
    clip_norm: float = 1.0
    noise_std: float = 0.1

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def dp_clip_noise(grads: GradientBundle, dp: DpConfig, rng: np.random.Generator) -> GradientBundle:
    """Clip the global parameter-gradient norm to ``clip_norm``, then add Gaussian noise."""
    norm = grads.global_norm()
    scale = min(1.0, dp.clip_norm / norm) if norm > 0 else 1.0

    def proc(g):
        out = g * scale
        if dp.noise_std:
            out = out + rng.standard_normal(g.shape) * dp.noise_std
        return out

    return GradientBundle([proc(g) for g in grads.weight_grads],
                          [proc(g) for g in grads.bias_grads],
                          grads.input_grad.copy())


def dp_hook(dp: DpConfig, rng: np.random.Generator) -> Callable[[GradientBundle], GradientBundle]:
    return lambda g: dp_clip_noise(g, dp, rng)


# ---------------------------------------------------------------- blur


def gaussian_kernel_1d(kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd number")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = kernel_size // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = k.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    # "symmetric" mirrors including the edge pixel, which conserves mass
    p = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for j, w in enumerate(k):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(j, j + n)
        out += w * p[tuple(sl)]
    return out


def gaussian_blur(image_row, grid: tuple[int, int], kernel_size: int = 5,
                  sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur of one flattened image or a batch of them."""
    h, w = grid
    if kernel_size > min(h, w):
        raise ValueError("kernel larger than the image")
    k = gaussian_kernel_1d(kernel_size, sigma)
    X = np.asarray(image_row, dtype=float)
    single = X.ndim == 1
    imgs = X.reshape(-1, h, w)
    out = np.stack([_blur_axis(_blur_axis(im, k, 0), k, 1) for im in imgs])
    out = np.clip(out, 0.0, 1.0).reshape(-1, h * w)
    return out[0] if single else out


# ---------------------------------------------------------------- audits


def activation_scores(model, X) -> np.ndarray:
    return hidden_activations(model, X, 0).mean(axis=1)


def activation_anomaly_threshold(model, reference: Dataset | np.ndarray,
                                 percentile: float = 95.0) -> float:
    X = reference.features if isinstance(reference, Dataset) else np.asarray(reference)
    if X.shape[0] == 0:
        raise ValueError("reference set is empty")
    return float(np.percentile(activation_scores(model, X), percentile, method="linear"))


def flag_activation_anomalies(model, X, threshold: float) -> np.ndarray:
    return activation_scores(model, X) > threshold


def _fold_ids(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified fold assignment: each class is dealt round-robin after a shuffle."""
    ids = np.empty(labels.size, dtype=np.int64)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if rows.size < folds:
            raise ValueError(f"class {c} has fewer rows than folds")
        rows = rows[rng.permutation(rows.size)]
        ids[rows] = np.arange(rows.size) % folds
    return ids


def crossval_label_audit(dataset: Dataset, model_factory: Callable[[int], MlpModel],
                         cfg: TrainConfig, rng: np.random.Generator, folds: int = 5,
                         flag_threshold: int = 3, repeats: int = 3) -> AuditReport:
    """Count held-out misclassifications per row over ``repeats`` k-fold rounds.

    ``model_factory(seed)`` must return a fresh untrained model. Rows wrong in at
    least ``flag_threshold`` rounds are reported as suspects.
    """
    if folds < 2:
        raise ValueError("need at least two folds")
    counts = np.zeros(dataset.n, dtype=np.int64)
    for rep in range(repeats):
        ids = _fold_ids(dataset.labels, folds, rng)
        for f in range(folds):
            held = ids == f
            seed = int(rng.integers(0, 2**31 - 1))
            model = model_factory(seed)
            train(model, dataset.subset(np.flatnonzero(~held)),
                  TrainConfig(**{**cfg.__dict__, "seed": seed}))
            wrong = predict(model, dataset.features[held]) != dataset.labels[held]
            counts[np.flatnonzero(held)[wrong]] += 1
    flagged = counts >= flag_threshold
    p, r = _score(flagged, dataset)
    return AuditReport(np.flatnonzero(flagged), counts, np.flatnonzero(~flagged), p, r)


def consensus_disagreement_filter(dataset: Dataset, model_a, model_b) -> tuple[Dataset, AuditReport]:
    disagree = predict(model_a, dataset.features) != predict(model_b, dataset.features)
    return _removal(dataset, disagree)


def pseudo_label_relabel(model, dataset: Dataset, rows) -> Dataset:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= dataset.n):
        raise IndexError("row index out of range")
    out = dataset.copy()
    if rows.size == 0:
        return out
    new = predict(model, dataset.features[rows])
    out.labels[rows] = new
    for i in rows[new != dataset.labels[rows]]:
        out.flags[i] = f"{base_flag(out.flags[i])}+relabeled"
    return out
