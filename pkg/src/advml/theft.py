"""Model stealing and privacy attacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .evasion import fgsm
from .nn import (Loss, MlpModel, TrainConfig, argmax_rows, fit_arrays, forward, mlp_init,
                 per_row_loss, predict, predict_logits, softmax)


class QueryOracle(Protocol):
    calls: int

    def __call__(self, X: np.ndarray) -> np.ndarray: ...


class ModelOracle:
    """Probability oracle over a local model; ``calls`` counts queried rows."""

    def __init__(self, model, transform: Callable[[np.ndarray], np.ndarray] | None = None):
        self.model = model
        self.transform = transform
        self.calls = 0

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.calls += X.shape[0]
        probs = softmax(predict_logits(self.model, X))
        return self.transform(probs) if self.transform else probs


class FunctionOracle:
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.calls = 0

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.calls += X.shape[0]
        return self.fn(X)


def as_oracle(obj) -> QueryOracle:
    if isinstance(obj, (MlpModel,)) or hasattr(obj, "forward"):
        return ModelOracle(obj)
    return obj


def query_argmax_labels(oracle: QueryOracle, probe) -> np.ndarray:
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    if probe.shape[0] == 0:
        raise ValueError("probe set is empty")
    return argmax_rows(np.asarray(oracle(probe)))


def train_surrogate(arch: Sequence[int], probe, stolen_labels, cfg: TrainConfig,
                    rng: np.random.Generator, activation: str = "relu") -> MlpModel:
    """Fit a fresh model to ``(probe, stolen_labels)`` with cross-entropy on hard labels."""
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    if probe.shape[0] == 0:
        raise ValueError("cannot train a surrogate on zero probes")
    arch = list(arch)
    if arch[0] != probe.shape[1]:
        arch = [probe.shape[1]] + arch
    model = mlp_init(arch, activation, rng)
    fit_arrays(model, probe, np.asarray(stolen_labels, dtype=np.int64), cfg,
               rng=np.random.default_rng(cfg.seed))
    return model


def agreement_rate(a, b, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("X is empty")
    ya = query_argmax_labels(as_oracle(a), X)
    yb = query_argmax_labels(as_oracle(b), X)
    return float(np.mean(ya == yb))


def transfer_attack_rate(surrogate, target, X, labels, eps: float, clamp=(0.0, 1.0)) -> float:
    """Misclassification rate on ``target`` of FGSM examples crafted on ``surrogate``,
    over the rows ``target`` originally got right. Pass ``clamp=None`` for
    unbounded features."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    target = as_oracle(target)
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    correct = query_argmax_labels(target, X) == labels
    if not correct.any():
        raise ValueError("target classifies no row correctly")
    X_adv = fgsm(surrogate, X[correct], labels[correct], eps, clamp)
    return float(np.mean(query_argmax_labels(target, X_adv) != labels[correct]))


def clone_whitebox(model: MlpModel) -> MlpModel:
    return model.copy()


@dataclass
class InversionConfig:
    steps: int = 1000
    lr: float = 0.1
    init: str = "zeros"
    seed: int = 0
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("inversion needs at least one step")


@dataclass
class InversionResult:
    x: np.ndarray
    prob_trace: list[float] = field(default_factory=list)

    @property
    def final_prob(self) -> float:
        return self.prob_trace[-1]


def invert_class_input(model: MlpModel, target_class: int,
                       cfg: InversionConfig | None = None) -> InversionResult:
    """Gradient ascent on the target logit starting from a blank (or random) input."""
    cfg = cfg or InversionConfig()
    if not 0 <= target_class < model.n_outputs:
        raise ValueError(f"target class {target_class} out of range")
    if cfg.init == "zeros":
        x = np.zeros((1, model.n_inputs))
    elif cfg.init == "gaussian":
        x = np.random.default_rng(cfg.seed).standard_normal((1, model.n_inputs))
        if cfg.clamp:
            x = np.clip(x, *cfg.clamp)
    else:
        raise ValueError(f"unknown init {cfg.init!r}")
    upstream = np.zeros((1, model.n_outputs))
    upstream[0, target_class] = -1.0  # d(-logit_c)/d(logits)
    trace = []
    for _ in range(cfg.steps):
        _, cache = forward(model, x)
        grad = model.backward_from_output(cache, upstream).input_grad
        x = x - cfg.lr * grad
        if cfg.clamp:
            x = np.clip(x, *cfg.clamp)
        trace.append(float(softmax(predict_logits(model, x))[0, target_class]))
    return InversionResult(x[0], trace)


def membership_scores(model, X, labels) -> np.ndarray:
    """Per-row cross-entropy; lower means more member-like."""
    return per_row_loss(Loss.CROSS_ENTROPY, predict_logits(model, X), labels)


@dataclass
class MembershipResult:
    best_threshold: float
    advantage: float
    tpr: float
    fpr: float


def membership_advantage(member_scores, nonmember_scores) -> MembershipResult:
    """Best TPR - FPR over thresholds; a row is called a member when its score
    is strictly below the threshold."""
    m = np.sort(np.asarray(member_scores, dtype=float))
    nm = np.sort(np.asarray(nonmember_scores, dtype=float))
    if m.size == 0 or nm.size == 0:
        raise ValueError("both score sets must be nonempty")
    candidates = np.unique(np.concatenate([m, nm, [np.inf]]))
    tpr = np.searchsorted(m, candidates, side="left") / m.size
    fpr = np.searchsorted(nm, candidates, side="left") / nm.size
    adv = tpr - fpr
    i = int(np.argmax(adv))
    return MembershipResult(float(candidates[i]), float(adv[i]), float(tpr[i]), float(fpr[i]))


def stolen_accuracy(surrogate, X, labels) -> float:
    return float(np.mean(predict(surrogate, X) == np.asarray(labels)))
