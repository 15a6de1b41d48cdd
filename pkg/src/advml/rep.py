"""Representation-level techniques: distillation, contrastive embeddings,
rotation pretext training and autoencoder anomaly scores."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, train_test_split
from .nn import (Activation, Loss, MlpModel, TrainConfig, batch_slices, fit_arrays, forward,
                 log_softmax, mlp_init, per_row_loss, predict, predict_logits, softmax)


# ---------------------------------------------------------------- distillation


def distillation_loss(student_logits, teacher_logits, temperature: float = 3.0) -> float:
    """KL(teacher || student) on temperature-softened outputs, summed over
    classes and averaged over the batch."""
    s = np.atleast_2d(np.asarray(student_logits, dtype=float))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=float))
    if s.shape != t.shape:
        raise ValueError(f"student {s.shape} and teacher {t.shape} shapes differ")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_p = log_softmax(t / temperature)
    log_q = log_softmax(s / temperature)
    return float(np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=1)))


def distillation_grad(student_logits, teacher_logits, temperature: float = 3.0) -> np.ndarray:
    p = softmax(teacher_logits / temperature)
    q = softmax(student_logits / temperature)
    return (q - p) / (temperature * student_logits.shape[0])


def distill_train(teacher: MlpModel, student: MlpModel, X, cfg: TrainConfig,
                  temperature: float = 3.0) -> list[float]:
    """Fit ``student`` to the teacher's softened outputs on ``X`` (no hard-label term)."""
    X = np.asarray(X, dtype=float)
    teacher_logits = predict_logits(teacher, X)
    opt = cfg.make_optimizer()
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in batch_slices(X.shape[0], cfg.batch_size, cfg.shuffle, rng):
            out, cache = forward(student, X[idx])
            total += distillation_loss(out, teacher_logits[idx], temperature) * len(idx)
            g = distillation_grad(out, teacher_logits[idx], temperature)
            opt.step(student, student.backward_from_output(cache, g))
        losses.append(total / X.shape[0])
    return losses


# ---------------------------------------------------------------- contrastive


def contrastive_loss(z1, z2, label, margin: float = 1.0) -> float:
    """Pair label 0 pulls embeddings together, 1 pushes them at least ``margin`` apart."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=float))
    z2 = np.atleast_2d(np.asarray(z2, dtype=float))
    if z1.shape != z2.shape:
        raise ValueError("embedding shapes differ")
    y = np.broadcast_to(np.asarray(label, dtype=float), (z1.shape[0],))
    d = np.linalg.norm(z1 - z2, axis=1)
    return float(np.mean((1 - y) * d ** 2 + y * np.maximum(margin - d, 0.0) ** 2))


def contrastive_grads(z1: np.ndarray, z2: np.ndarray, y: np.ndarray, margin: float):
    diff = z1 - z2
    d = np.linalg.norm(diff, axis=1, keepdims=True)
    n = z1.shape[0]
    hinge = np.maximum(margin - d, 0.0)
    safe = np.where(d > 0, d, 1.0)
    # d/dz1 of hinge^2 = -2 hinge * diff / d; undefined at d = 0, taken as 0
    push = np.where(d > 0, -2.0 * hinge * diff / safe, 0.0)
    y = y.reshape(-1, 1)
    g1 = ((1 - y) * 2.0 * diff + y * push) / n
    return g1, -g1


def contrastive_pairs(labels: np.ndarray, rng: np.random.Generator,
                      max_pairs: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Balanced (i, j, label) pairs: same-class pairs get 0, cross-class pairs 1."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    pos, neg = [], []
    for c in classes:
        rows = np.flatnonzero(labels == c)
        if rows.size < 2:
            raise ValueError(f"class {c} has fewer than two rows")
        pos.extend(itertools.combinations(rows.tolist(), 2))
    for a, b in itertools.combinations(classes.tolist(), 2):
        ra, rb = np.flatnonzero(labels == a), np.flatnonzero(labels == b)
        neg.extend(itertools.product(ra.tolist(), rb.tolist()))
    k = min(len(pos), len(neg))
    if max_pairs is not None:
        k = min(k, max_pairs // 2)
    pos = np.asarray(pos)[rng.choice(len(pos), size=k, replace=False)]
    neg = np.asarray(neg)[rng.choice(len(neg), size=k, replace=False)]
    pairs = np.vstack([pos, neg])
    y = np.concatenate([np.zeros(k), np.ones(k)])
    return pairs[:, 0], pairs[:, 1], y


def contrastive_train(encoder: MlpModel, dataset: Dataset, cfg: TrainConfig, margin: float = 1.0,
                      max_pairs: int = 4000) -> list[float]:
    rng = np.random.default_rng(cfg.seed)
    i, j, y = contrastive_pairs(dataset.labels, rng, max_pairs)
    X = dataset.features
    opt = cfg.make_optimizer()
    losses = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in batch_slices(y.size, cfg.batch_size, cfg.shuffle, rng):
            z1, c1 = forward(encoder, X[i[idx]])
            z2, c2 = forward(encoder, X[j[idx]])
            total += contrastive_loss(z1, z2, y[idx], margin) * len(idx)
            g1, g2 = contrastive_grads(z1, z2, y[idx], margin)
            a = encoder.backward_from_output(c1, g1)
            b = encoder.backward_from_output(c2, g2)
            a.weight_grads = [p + q for p, q in zip(a.weight_grads, b.weight_grads)]
            a.bias_grads = [p + q for p, q in zip(a.bias_grads, b.bias_grads)]
            opt.step(encoder, a)
        losses.append(total / y.size)
    return losses


def embedding_distances(encoder, dataset: Dataset) -> tuple[float, float]:
    """Mean intra-class and inter-class pairwise embedding distances."""
    Z = predict_logits(encoder, dataset.features)
    D = np.linalg.norm(Z[:, None, :] - Z[None, :, :], axis=2)
    same = dataset.labels[:, None] == dataset.labels[None, :]
    off = ~np.eye(dataset.n, dtype=bool)
    return float(D[same & off].mean()), float(D[~same].mean())


# ---------------------------------------------------------------- rotation pretext


def rotate90(image_row, grid: tuple[int, int], k: int) -> np.ndarray:
    """Rotate a flattened image ``k`` quarter-turns clockwise."""
    if grid is None:
        raise ValueError("rotation needs the image grid shape")
    h, w = grid
    k %= 4
    if k % 2 and h != w:
        raise ValueError("odd quarter-turns need a square grid")
    X = np.asarray(image_row, dtype=float)
    single = X.ndim == 1
    imgs = X.reshape(-1, h, w)
    out = np.rot90(imgs, k=-k, axes=(1, 2)).reshape(imgs.shape[0], -1)
    return out[0].copy() if single else out.copy()


def rotation_dataset(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    """Each image rotated by a seeded ``k``; labels are ``k``. Rotation counts
    are balanced to within one per class."""
    if dataset.grid is None or dataset.grid[0] != dataset.grid[1]:
        raise ValueError("rotation pretext needs square grid images")
    ks = np.arange(dataset.n) % 4
    ks = ks[rng.permutation(dataset.n)]
    X = np.vstack([rotate90(x, dataset.grid, int(k)) for x, k in zip(dataset.features, ks)])
    return Dataset(X, ks, 4, dataset.grid)


@dataclass
class RotationResult:
    model: MlpModel
    accuracy: float


def rotation_pretext_train(hidden: Sequence[int], dataset: Dataset, cfg: TrainConfig,
                           rng: np.random.Generator, test_fraction: float = 0.25) -> RotationResult:
    """Train an encoder plus 4-way head to predict rotations; report held-out accuracy."""
    rot = rotation_dataset(dataset, rng)
    tr, te = train_test_split(rot, test_fraction, rng)
    dims = [dataset.d, *hidden, 4]
    model = mlp_init(dims, Activation.RELU, rng)
    fit_arrays(model, tr.features, tr.labels, cfg)
    acc = float(np.mean(predict(model, te.features) == te.labels))
    return RotationResult(model, acc)


# ---------------------------------------------------------------- autoencoder


def autoencoder_init(d: int, hidden: int, bottleneck: int, rng: np.random.Generator) -> MlpModel:
    if bottleneck >= d:
        raise ValueError("bottleneck must be smaller than the input dimension")
    return mlp_init([d, hidden, bottleneck, hidden, d], Activation.RELU, rng,
                    output_activation=Activation.SIGMOID)


def autoencoder_train(model: MlpModel, X, cfg: TrainConfig):
    cfg = TrainConfig(**{**cfg.__dict__, "loss": Loss.MSE})
    X = np.asarray(X, dtype=float)
    return fit_arrays(model, X, X, cfg)


def reconstruction_scores(model: MlpModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return per_row_loss(Loss.MSE, predict_logits(model, X), X)


def flag_reconstruction(model: MlpModel, X, threshold: float = 0.02) -> np.ndarray:
    return reconstruction_scores(model, X) > threshold
