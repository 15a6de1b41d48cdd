"""Dense feed-forward network with exact reverse-mode gradients.

Weights are stored ``(out, in)`` and biases ``(1, out)``; a batch ``X`` of
shape ``(n, in)`` maps to ``X @ W.T + b``. The hidden activation is applied
after every layer but the last, whose output activation defaults to identity
(raw logits).
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    IDENTITY = "identity"


class Loss(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"
    SMOOTH_L1 = "smooth_l1"
    MAE_ONE_HOT = "mae_one_hot"
    BCE = "bce"


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    kind = Activation(kind)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SIGMOID:
        return sigmoid(z)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z.copy()


def activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``a`` = f(z))."""
    kind = Activation(kind)
    if kind is Activation.RELU:
        return (z > 0).astype(float)
    if kind is Activation.SIGMOID:
        return a * (1.0 - a)
    if kind is Activation.TANH:
        return 1.0 - a * a
    return np.ones_like(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def argmax_rows(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(scores, axis=1)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.RELU
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.output_activation = Activation(self.output_activation)
        if not self.weights:
            raise ValueError("model needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (1, W.shape[0]):
                raise ValueError(f"layer {i}: bad shapes W{W.shape} b{b.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {W.shape[1]} does not chain")

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.n_inputs] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def forward(self, X):
        return forward(self, X)

    def backward(self, cache, targets, loss=Loss.CROSS_ENTROPY, **loss_kw):
        return backward(self, cache, targets, loss, **loss_kw)

    def backward_from_output(self, cache, grad_out):
        return backward_from_output(self, cache, grad_out)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class GradientBundle:
    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grad: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for dW, db in zip(self.weight_grads, self.bias_grads):
            out.extend([dW, db])
        return out

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.params())))

    def copy(self) -> "GradientBundle":
        return copy.deepcopy(self)


def mlp_init(
    layer_dims: Sequence[int],
    activation: Activation = Activation.RELU,
    rng: np.random.Generator | None = None,
    output_activation: Activation = Activation.IDENTITY,
) -> MlpModel:
    """Gaussian init with std ``1/sqrt(in_dim)`` and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"invalid layer dims {list(layer_dims)}")
    if rng is None:
        rng = np.random.default_rng(0)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((d_out, d_in)) / math.sqrt(d_in))
        biases.append(np.zeros((1, d_out)))
    return MlpModel(weights, biases, activation, output_activation)


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D batch, got shape {X.shape}")
    return X


def forward(model: MlpModel, X) -> tuple[np.ndarray, ForwardCache]:
    X = _as_batch(X)
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"input has {X.shape[1]} columns, model expects {model.n_inputs}")
    pre, post = [], []
    a = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        a = activate(model.output_activation if i == last else model.activation, z)
        pre.append(z)
        post.append(a)
    return a, ForwardCache(X, pre, post)


def predict_logits(model, X) -> np.ndarray:
    return model.forward(X)[0]


def predict_proba(model, X) -> np.ndarray:
    return softmax(predict_logits(model, X))


def predict(model, X) -> np.ndarray:
    return argmax_rows(predict_logits(model, X))


def hidden_activations(model: MlpModel, X, layer: int = 0) -> np.ndarray:
    model = getattr(model, "model", model)
    if len(model.weights) < 2:
        raise ValueError("model has no hidden layer")
    return forward(model, X)[1].post[layer]


# ---------------------------------------------------------------- losses


def _targets_for(kind: Loss, outputs: np.ndarray, targets) -> np.ndarray:
    """Class indices for cross-entropy, a dense target matrix otherwise."""
    t = np.asarray(targets)
    n, k = outputs.shape
    if kind is Loss.CROSS_ENTROPY:
        t = t.reshape(-1)
        if t.shape[0] != n:
            raise ValueError(f"{t.shape[0]} labels for {n} rows")
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(np.equal(np.mod(t, 1), 0)):
                raise ValueError("cross-entropy needs integer class labels")
            t = t.astype(int)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"label out of range for {k} classes")
        return t
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if kind is Loss.BCE and k == 1:
            return t.astype(float)[:, None]
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"label out of range for {k} classes")
        onehot = np.zeros((n, k))
        onehot[np.arange(n), t] = 1.0
        return onehot
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape != outputs.shape:
        raise ValueError(f"target shape {t.shape} does not match output {outputs.shape}")
    return t


def per_row_loss(kind: Loss, outputs, targets, beta: float = 1.0) -> np.ndarray:
    """Loss of every row; :func:`loss_value` is the mean of this vector."""
    kind = Loss(kind)
    outputs = _as_batch(outputs)
    t = _targets_for(kind, outputs, targets)
    n = outputs.shape[0]
    if kind is Loss.CROSS_ENTROPY:
        return -log_softmax(outputs)[np.arange(n), t]
    if kind is Loss.MSE:
        return np.mean((outputs - t) ** 2, axis=1)
    if kind is Loss.SMOOTH_L1:
        if beta <= 0:
            raise ValueError("beta must be positive")
        d = np.abs(outputs - t)
        return np.mean(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta), axis=1)
    if kind is Loss.MAE_ONE_HOT:
        return np.mean(np.abs(outputs - t), axis=1)
    # BCE on logits: log(1+e^z) - y z, computed stably
    z = outputs
    return np.mean(np.logaddexp(0.0, z) - t * z, axis=1)


def loss_value(kind: Loss, outputs, targets, beta: float = 1.0) -> float:
    return float(np.mean(per_row_loss(kind, outputs, targets, beta)))


def loss_output_grad(kind: Loss, outputs, targets, beta: float = 1.0) -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. the network outputs."""
    kind = Loss(kind)
    t = _targets_for(kind, outputs, targets)
    n, k = outputs.shape
    if kind is Loss.CROSS_ENTROPY:
        g = softmax(outputs)
        g[np.arange(n), t] -= 1.0
        return g / n
    r = outputs - t
    if kind is Loss.MSE:
        return 2.0 * r / (n * k)
    if kind is Loss.SMOOTH_L1:
        return np.where(np.abs(r) < beta, r / beta, np.sign(r)) / (n * k)
    if kind is Loss.MAE_ONE_HOT:
        return np.sign(r) / (n * k)
    return (sigmoid(outputs) - t) / (n * k)


# ---------------------------------------------------------------- backward


def backward_from_output(model: MlpModel, cache: ForwardCache, grad_out) -> GradientBundle:
    """Backpropagate an upstream gradient given w.r.t. the model output."""
    if len(cache.pre) != len(model.weights) or cache.inputs.shape[1] != model.n_inputs:
        raise ValueError("cache does not belong to this model")
    delta = np.asarray(grad_out, dtype=float)
    if delta.shape != cache.output.shape:
        raise ValueError(f"upstream gradient shape {delta.shape} != output {cache.output.shape}")
    last = len(model.weights) - 1
    dWs: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        kind = model.output_activation if i == last else model.activation
        delta = delta * activation_grad(kind, cache.pre[i], cache.post[i])
        a_prev = cache.inputs if i == 0 else cache.post[i - 1]
        dWs[i] = delta.T @ a_prev
        dbs[i] = delta.sum(axis=0, keepdims=True)
        delta = delta @ model.weights[i]
    return GradientBundle(dWs, dbs, delta)


def backward(model: MlpModel, cache: ForwardCache, targets, loss: Loss = Loss.CROSS_ENTROPY,
             beta: float = 1.0) -> GradientBundle:
    grad_out = loss_output_grad(Loss(loss), cache.output, targets, beta)
    return model.backward_from_output(cache, grad_out)


def loss_and_grads(model, X, targets, loss: Loss = Loss.CROSS_ENTROPY, beta: float = 1.0):
    out, cache = model.forward(X)
    value = loss_value(loss, out, targets, beta)
    return value, model.backward(cache, targets, loss, beta=beta)


def input_gradient(model, X, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the input batch."""
    return loss_and_grads(model, X, labels, Loss.CROSS_ENTROPY)[1].input_grad


def finite_diff_gradient(model: MlpModel, X, targets, loss: Loss = Loss.CROSS_ENTROPY,
                         h: float = 1e-5, beta: float = 1.0) -> GradientBundle:
    """Central-difference estimate of every parameter and input gradient."""
    if h <= 0:
        raise ValueError("h must be positive")
    X = _as_batch(X).copy()

    def f() -> float:
        return loss_value(loss, forward(model, X)[0], targets, beta)

    def probe(arr: np.ndarray) -> np.ndarray:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = f()
            arr[idx] = orig - h
            down = f()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        return g

    dWs = [probe(W) for W in model.weights]
    dbs = [probe(b) for b in model.biases]
    return GradientBundle(dWs, dbs, probe(X))


def max_relative_error(a: GradientBundle, b: GradientBundle) -> float:
    """Largest absolute gap over all entries, relative to the gradient scale."""
    pairs = list(zip(a.params() + [a.input_grad], b.params() + [b.input_grad]))
    gap = max(float(np.max(np.abs(x - y))) for x, y in pairs)
    scale = max(max(float(np.max(np.abs(x))), float(np.max(np.abs(y)))) for x, y in pairs)
    return gap / max(scale, 1e-300)


# ---------------------------------------------------------------- optimizers


@dataclass
class Sgd:
    lr: float = 0.01

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def step(self, model: MlpModel, grads: GradientBundle) -> None:
        for p, g in zip(model.params(), grads.params()):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
            p -= self.lr * g


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def step(self, model: MlpModel, grads: GradientBundle) -> None:
        params, gs = model.params(), grads.params()
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, gs, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str = "adam", lr: float | None = None):
    name = name.lower()
    if name == "sgd":
        return Sgd(0.01 if lr is None else lr)
    if name == "adam":
        return Adam(0.001 if lr is None else lr)
    raise ValueError(f"unknown optimizer {name!r}")


def optimizer_step(opt, model: MlpModel, grads: GradientBundle):
    opt.step(model, grads)
    return model, opt


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    loss: Loss = Loss.CROSS_ENTROPY
    optimizer: str = "adam"
    lr: float = 0.01
    seed: int = 0
    shuffle: bool = True
    beta: float = 1.0

    def __post_init__(self):
        self.loss = Loss(self.loss)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def make_optimizer(self):
        return make_optimizer(self.optimizer, self.lr)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class Metrics:
    accuracy: float
    mean_loss: float


GradHook = Callable[[GradientBundle], GradientBundle]


def batch_slices(n: int, batch_size: int, shuffle: bool, rng: np.random.Generator | None):
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fit_arrays(model, X, targets, cfg: TrainConfig, grad_hook: GradHook | None = None,
               optimizer=None, rng: np.random.Generator | None = None) -> TrainReport:
    """Minibatch training on raw arrays; ``targets`` is anything the loss accepts."""
    X = _as_batch(X)
    targets = np.asarray(targets)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"data has {X.shape[1]} features, model expects {model.n_inputs}")
    opt = optimizer if optimizer is not None else cfg.make_optimizer()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    report = TrainReport()
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batch_slices(n, cfg.batch_size, cfg.shuffle, rng):
            value, grads = loss_and_grads(model, X[idx], targets[idx], cfg.loss, cfg.beta)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch} (lr={cfg.lr}, loss={cfg.loss.value})")
            if grad_hook is not None:
                grads = grad_hook(grads)
            opt.step(model, grads)
            total += value * len(idx)
        report.epoch_losses.append(total / n)
    return report


def train(model, dataset, cfg: TrainConfig, grad_hook: GradHook | None = None,
          optimizer=None) -> TrainReport:
    """Train ``model`` in place on a :class:`~advml.data.Dataset`."""
    return fit_arrays(model, dataset.features, dataset.labels, cfg, grad_hook, optimizer)


def evaluate(model, dataset) -> Metrics:
    if dataset.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.features)
    acc = float(np.mean(argmax_rows(logits) == dataset.labels))
    return Metrics(acc, loss_value(Loss.CROSS_ENTROPY, logits, dataset.labels))


def accuracy(model, X, labels) -> float:
    return float(np.mean(predict(model, X) == np.asarray(labels)))
