"""Inference-time input attacks and a noise-divergence detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import input_gradient, predict, predict_proba


@dataclass
class EvasionConfig:
    epsilon: float = 0.1
    alpha: float = 0.01
    iters: int = 40
    clamp: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iters < 1:
            raise ValueError("PGD needs at least one iteration")


def fgsm(model, X, labels, epsilon: float, clamp=(0.0, 1.0)) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy loss.

    ``np.sign`` maps a zero gradient to zero, so an input whose gradient
    vanishes is returned unchanged. ``clamp=None`` skips the range clamp for
    features that are not pixel intensities.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    X = np.asarray(X, dtype=float)
    X_adv = X + epsilon * np.sign(input_gradient(model, X, labels))
    return X_adv if clamp is None else np.clip(X_adv, clamp[0], clamp[1])


def pgd(model, X, labels, cfg: EvasionConfig | None = None,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated FGSM: step, project into the epsilon box around ``X``, clamp to range."""
    cfg = cfg or EvasionConfig()
    X = np.asarray(X, dtype=float)
    lo, hi = X - cfg.epsilon, X + cfg.epsilon
    x = X.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x = np.clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), *cfg.clamp)
    for _ in range(cfg.iters):
        x = x + cfg.alpha * np.sign(input_gradient(model, x, labels))
        x = np.clip(x, lo, hi)
        x = np.clip(x, cfg.clamp[0], cfg.clamp[1])
    return x


def add_clamped_noise(X, noise_factor: float, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.clip(X + rng.standard_normal(X.shape) * noise_factor, 0.0, 1.0)


def detect_by_noise_divergence(model, X, rng: np.random.Generator, noise_factor: float = 0.2,
                               threshold: float = 0.1) -> np.ndarray:
    """Flag rows whose class probabilities move by more than ``threshold`` on
    more than half of the classes when Gaussian noise is added to the input."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    X = np.asarray(X, dtype=float)
    clean = predict_proba(model, X)
    noisy = predict_proba(model, add_clamped_noise(X, noise_factor, rng))
    exceed = np.abs(clean - noisy) > threshold
    return exceed.mean(axis=1) > 0.5


def misclassification_rate(model, X, labels) -> float:
    return float(np.mean(predict(model, X) != np.asarray(labels)))
