"""MLP heads on pooled descriptors, with sklearn classifier/regressor wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.metrics import accuracy_score, f1_score, mean_squared_error
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numerics as nx
from .global_mae import as_rng
from .numerics import MLP, Module, Tensor


class ProbeHead(Module):
    """Two-layer GELU MLP; hidden width defaults to the input width."""

    def __init__(self, n_in: int, n_out: int, hidden: int | None = None, seed=0):
        self.mlp = MLP(n_in, hidden or n_in, as_rng(seed), out=n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def classification_metrics(y_true, y_pred) -> dict:
    return {
        "acc": float(accuracy_score(y_true, y_pred)),
        "f1": float(f1_score(y_true, y_pred, average="macro")),
    }


def regression_metrics(y_true, y_pred) -> dict:
    return {"mse": float(mean_squared_error(y_true, y_pred))}


class _ProbeBase(BaseEstimator):
    def __init__(self, hidden=None, lr=1e-2, weight_decay=0.0, n_steps=300, standardize=True, random_state=0):
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.standardize = standardize
        self.random_state = random_state

    def _scale(self, X):
        return ((X - self.mean_) / self.scale_).astype(np.float32)

    def _fit_head(self, X, n_out, loss_fn):
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = np.maximum(X.std(axis=0), 1e-6)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        self.n_features_in_ = X.shape[1]
        self.head_ = ProbeHead(X.shape[1], n_out, self.hidden, seed=self.random_state)
        opt = nx.AdamW(self.head_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        xs = Tensor(self._scale(X))
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            opt.zero_grad()
            loss = loss_fn(self.head_(xs))
            nx.backward(loss)
            opt.step()
            self.loss_curve_.append(loss.item())
        return self

    def _forward(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        with nx.no_grad():
            return self.head_(Tensor(self._scale(X))).data


class ProbeClassifier(ClassifierMixin, _ProbeBase):
    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("probe needs at least two classes")
        codes = np.searchsorted(self.classes_, y)
        return self._fit_head(X, self.classes_.size, lambda out: nx.cross_entropy(out, codes))

    def predict_proba(self, X):
        logits = self._forward(X).astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self._forward(X).argmax(axis=1)]


class ProbeRegressor(RegressorMixin, _ProbeBase):
    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.y_mean_ = float(y.mean())
        self.y_scale_ = float(max(y.std(), 1e-6))
        target = Tensor(((y - self.y_mean_) / self.y_scale_).reshape(-1, 1))
        return self._fit_head(X, 1, lambda out: nx.mse(out, target))

    def predict(self, X):
        return self._forward(X)[:, 0] * self.y_scale_ + self.y_mean_
