"""Softmax classification primitives and the SGD + momentum update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import DivergenceError, ShapeError

LOG_EPS = 1e-12


def sigmoid(a):
    """Logistic sigmoid ``1 / (1 + exp(-a))``; saturates to exactly 0 or 1 without overflow."""
    out = expit(np.asarray(a, dtype=np.float64))
    return out if out.ndim else float(out)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probs, target) -> float | np.ndarray:
    """``-sum_k t_k ln y_k`` along the last axis.

    ``target`` is one-hot. Probabilities are clamped at 1e-12 so a zero at the
    target index yields a large finite loss rather than ``inf``.
    """
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"cross_entropy: probs {p.shape} vs target {t.shape}")
    loss = -(t * np.log(np.maximum(p, LOG_EPS))).sum(axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def softmax_ce_gradient(y, t, phi) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of cross-entropy through softmax for ``a = W phi + b``.

    Row ``j`` of the weight gradient is ``(y_j - t_j) * phi``; the bias
    gradient is ``y - t``.
    """
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if y.shape != t.shape or y.ndim != 1 or phi.ndim != 1:
        raise ShapeError(f"softmax_ce_gradient: y {y.shape}, t {t.shape}, phi {phi.shape}")
    delta = y - t
    return np.outer(delta, phi), delta


@dataclass
class TrainingHyper:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(params: dict, grads: dict, velocity: dict, hyper: TrainingHyper) -> tuple[dict, dict]:
    """Classical momentum update, in place.

    ``v <- momentum * v - lr * g`` then ``p <- p + v``. Missing velocity
    entries start at zero. With momentum 0 this is plain ``p - lr * g``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"parameter {name!r}: shape {p.shape} vs gradient {g.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= hyper.momentum
        v -= hyper.learning_rate * g
        p += v
    return params, velocity


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by minibatch SGD with momentum.

    The two-class case is the ``K = 2`` softmax. The loss is summed over the
    minibatch, so ``learning_rate`` scales with ``batch_size``.
    """

    def __init__(self, learning_rate=1e-2, momentum=0.9, batch_size=32, n_epochs=50, random_state=0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        targets = np.searchsorted(self.classes_, y)
        onehot = np.eye(len(self.classes_))[targets]
        rng = np.random.default_rng(self.random_state)
        params = {"W": np.zeros((len(self.classes_), X.shape[1])), "b": np.zeros(len(self.classes_))}
        velocity: dict = {}
        hyper = TrainingHyper(self.learning_rate, self.momentum, self.batch_size)
        self.loss_curve_ = []
        for _ in range(self.n_epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                probs = softmax(X[idx] @ params["W"].T + params["b"])
                total += float(cross_entropy(probs, onehot[idx]).sum())
                delta = probs - onehot[idx]
                sgd_step(params, {"W": delta.T @ X[idx], "b": delta.sum(axis=0)}, velocity, hyper)
            self.loss_curve_.append(total / len(X))
        self.coef_, self.intercept_ = params["W"], params["b"]
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return softmax(X @ self.coef_.T + self.intercept_)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
