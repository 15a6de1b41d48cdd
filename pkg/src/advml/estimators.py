"""scikit-learn compatible wrappers around the numpy core.

These expose the usual ``fit``/``predict``/``transform`` surface plus
``get_params``/``set_params`` so the lab's models and defenses compose with
sklearn pipelines, grid search and cross validation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, OutlierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from . import defense, evasion, nn, rep
from .data import Dataset
from .rng import make_rng


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """Dense network classifier trained with exact backprop.

    ``adversarial_eps > 0`` switches to FGSM adversarial training and
    ``dp_clip`` enables global-norm clipping with Gaussian gradient noise.
    """

    def __init__(self, hidden=(32,), activation="relu", loss="cross_entropy", epochs=30,
                 batch_size=32, lr=0.01, optimizer="adam", adversarial_eps=0.0, dp_clip=None,
                 dp_noise=0.1, random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.adversarial_eps = adversarial_eps
        self.dp_clip = dp_clip
        self.dp_noise = dp_noise
        self.random_state = random_state

    def _train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, loss=nn.Loss(self.loss),
                              optimizer=self.optimizer, lr=self.lr, seed=self.random_state)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=float)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        k = self.classes_.size
        dims = [X.shape[1], *self.hidden, k]
        self.model_ = nn.mlp_init(dims, self.activation, make_rng(self.random_state, "estimator-init"))
        cfg = self._train_config()
        ds = Dataset(X, codes, k)
        if self.adversarial_eps > 0:
            report = defense.adversarial_train(self.model_, ds, self.adversarial_eps, cfg)
        else:
            hook = None
            if self.dp_clip is not None:
                hook = defense.dp_hook(defense.DpConfig(self.dp_clip, self.dp_noise),
                                       make_rng(self.random_state, "estimator-dp"))
            report = nn.train(self.model_, ds, cfg, grad_hook=hook)
        self.loss_curve_ = list(report.epoch_losses)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=float, reset=False)
        return nn.predict_proba(self.model_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=float, reset=False)
        return nn.predict_logits(self.model_, X)


class AdversarialPerturber(TransformerMixin, BaseEstimator):
    """Transforms ``(X, y)`` into FGSM or PGD adversarial inputs against ``model``.

    ``model`` may be an :class:`MLPClassifier` or a raw :class:`advml.nn.MlpModel`.
    Labels are required, so use ``transform(X, y)`` directly.
    """

    def __init__(self, model=None, method="fgsm", eps=0.1, alpha=0.01, iters=40, random_state=0):
        self.model = model
        self.method = method
        self.eps = eps
        self.alpha = alpha
        self.iters = iters
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("model is required")
        if self.method not in ("fgsm", "pgd"):
            raise ValueError(f"unknown method {self.method!r}")
        self.fitted_ = True
        return self

    def _core(self):
        if isinstance(self.model, MLPClassifier):
            check_is_fitted(self.model, "model_")
            return self.model.model_, self.model.classes_
        return self.model, None

    def transform(self, X, y=None):
        check_is_fitted(self, "fitted_")
        if y is None:
            raise ValueError("adversarial perturbation needs the true labels")
        X, y = check_X_y(X, y, dtype=float)
        core, classes = self._core()
        codes = np.searchsorted(classes, y) if classes is not None else y.astype(int)
        if self.method == "fgsm":
            return evasion.fgsm(core, X, codes, self.eps)
        cfg = evasion.EvasionConfig(self.eps, self.alpha, self.iters)
        return evasion.pgd(core, X, codes, cfg, make_rng(self.random_state, "perturber"))

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)


class GaussianBlur(TransformerMixin, BaseEstimator):
    """Input-smoothing defense on flattened images of shape ``grid``."""

    def __init__(self, grid=(8, 8), kernel_size=5, sigma=1.0):
        self.grid = grid
        self.kernel_size = kernel_size
        self.sigma = sigma

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=float)
        if X.shape[1] != self.grid[0] * self.grid[1]:
            raise ValueError(f"expected {self.grid[0] * self.grid[1]} features, got {X.shape[1]}")
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = validate_data(self, X, dtype=float, reset=False)
        return defense.gaussian_blur(X, tuple(self.grid), self.kernel_size, self.sigma)


class NoiseInjector(TransformerMixin, BaseEstimator):
    # Gaussian noise clamped to [0, 1]; used for augmentation and the divergence detector.
    def __init__(self, noise_factor=0.2, random_state=0):
        self.noise_factor = noise_factor
        self.random_state = random_state

    def fit(self, X, y=None):
        validate_data(self, X, dtype=float)
        self.rng_ = make_rng(self.random_state, "noise-injector")
        return self

    def transform(self, X):
        check_is_fitted(self, "rng_")
        X = validate_data(self, X, dtype=float, reset=False)
        return evasion.add_clamped_noise(X, self.noise_factor, self.rng_)


class ReconstructionDetector(OutlierMixin, BaseEstimator):
    """Autoencoder anomaly detector: ``predict`` returns -1 when the
    reconstruction MSE exceeds ``threshold`` and 1 otherwise."""

    def __init__(self, hidden=32, bottleneck=8, threshold=0.02, epochs=100, batch_size=32, lr=0.01,
                 random_state=0):
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.threshold = threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=float)
        self.model_ = rep.autoencoder_init(X.shape[1], self.hidden, self.bottleneck,
                                           make_rng(self.random_state, "autoencoder"))
        cfg = nn.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             seed=self.random_state)
        rep.autoencoder_train(self.model_, X, cfg)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=float, reset=False)
        # sklearn convention: higher means more normal
        return -rep.reconstruction_scores(self.model_, X)

    def decision_function(self, X):
        return self.score_samples(X) + self.threshold

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)


def as_matrix(X) -> np.ndarray:
    """Validate a 2-D finite float matrix."""
    return check_array(X, dtype=float)
