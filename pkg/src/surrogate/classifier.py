"""Logistic classifier over one-hot codes with public pretraining and DP-SGD fine-tuning.

Privacy accounting treats every DP-SGD step as a full Gaussian release
(no subsampling amplification) and composes them under zCDP, so the reported
epsilon is an upper bound.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import OneHotEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .privacy import PrivacyBudget, calibrate_sigma, gaussian_rho, zcdp_epsilon
from .schema import Dataset

DEFAULT_DELTA = 1e-5

# classifier hyperparameter grid for Task 1
PRETRAIN_GRID = {
    "pre_num_epochs": (1, 9),
    "pre_batch_size": (32, 128),
    "pre_lr": (3e-4, 3e-5),
}
FINETUNE_GRID = {
    "dp_num_epochs": (20,),
    "dp_batch_size": (128,),
    "dp_lr": (3e-3, 3e-4),
}


@dataclass(frozen=True)
class PretrainParams:
    pre_num_epochs: int = 9
    pre_batch_size: int = 32
    pre_lr: float = 3e-4

    def __post_init__(self):
        if self.pre_num_epochs < 1 or self.pre_batch_size < 1 or not self.pre_lr > 0:
            raise ValueError("pretraining parameters must be positive (epochs >= 1)")


@dataclass(frozen=True)
class DpSgdParams:
    dp_num_epochs: int = 20
    dp_batch_size: int = 128
    dp_lr: float = 3e-3
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.dp_num_epochs < 1 or self.dp_batch_size < 1 or not self.dp_lr > 0 or not self.clip_norm > 0:
            raise ValueError("DP-SGD parameters must be positive")


def encode_features(dataset: Dataset, target: str) -> tuple[np.ndarray, np.ndarray]:
    """One-hot encode every non-target variable over its full schema domain."""
    schema = dataset.schema
    t = schema.position(target)
    if schema[target].cardinality != 2:
        raise ValueError(f"target {target!r} must be binary")
    cols = [j for j in range(len(schema)) if j != t]
    enc = OneHotEncoder(categories=[list(range(schema.variables[j].cardinality)) for j in cols],
                        sparse_output=False, dtype=float)
    X = enc.fit_transform(dataset.codes[:, cols]) if cols else np.zeros((len(dataset), 0))
    return X, dataset.codes[:, t].astype(np.int64)


def split_id(dataset: Dataset) -> str:
    return hashlib.sha1(np.ascontiguousarray(dataset.codes).tobytes()).hexdigest()[:16]


class _Adam:
    """Adam moment estimates; applied to already-privatised gradients (post-processing)."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


class DPLogisticClassifier(ClassifierMixin, BaseEstimator):
    """Binary logistic regression trained by (DP-)SGD.

    ``fit`` runs DP-SGD when ``private`` is true and continues from pretrained
    weights if :meth:`pretrain` was called first. ``noise_multiplier`` overrides
    calibration (use 0 together with ``clip_norm=inf`` for plain SGD).
    ``optimizer`` is ``"adam"`` (moments over the noisy gradient) or ``"sgd"``.
    ``monitor``, if set, is called after every step with a dict holding the
    step index, per-example contribution norms, and the injected noise.
    """

    def __init__(self, epsilon=1.0, delta=DEFAULT_DELTA, epochs=20, batch_size=128, learning_rate=3e-3,
                 clip_norm=1.0, noise_multiplier=None, private=True, init_scale=0.01,
                 optimizer="adam", random_state=None, monitor=None):
        self.epsilon = epsilon
        self.delta = delta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.private = private
        self.init_scale = init_scale
        self.optimizer = optimizer
        self.random_state = random_state
        self.monitor = monitor

    def _init_weights(self, n_features: int):
        rng = np.random.default_rng(np.random.SeedSequence([0 if self.random_state is None else self.random_state, 0]))
        self.coef_ = rng.normal(0.0, self.init_scale, n_features) if self.init_scale > 0 else np.zeros(n_features)
        self.intercept_ = 0.0
        self.classes_ = np.array([0, 1])
        self.provenance_ = []
        self.privacy_ledger_ = []

    def _ensure_weights(self, n_features: int):
        if not hasattr(self, "coef_"):
            self._init_weights(n_features)
        elif self.coef_.shape[0] != n_features:
            raise ValueError(f"model has {self.coef_.shape[0]} features, data has {n_features}")

    def _sgd(self, X, y, epochs, batch_size, lr, clip, sigma, stream: int, monitor=None) -> int:
        seeds = np.random.SeedSequence([0 if self.random_state is None else self.random_state, stream]).spawn(2)
        order_rng, noise_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
        n = len(y)
        theta = np.append(self.coef_, self.intercept_)
        opt = _Adam(theta.shape) if self.optimizer == "adam" else None
        step = 0
        for _ in range(epochs):
            perm = order_rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = perm[start:start + batch_size]
                xb, yb = X[idx], y[idx]
                resid = expit(xb @ theta[:-1] + theta[-1]) - yb
                grads = np.hstack([resid[:, None] * xb, resid[:, None]])
                norms = np.sqrt((grads**2).sum(axis=1))
                if clip is not None:
                    factor = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
                    grads = grads * factor[:, None]
                g = grads.sum(axis=0) / len(idx)
                noise = None
                if sigma is not None:
                    noise = noise_rng.normal(0.0, sigma * clip / len(idx), g.shape) if sigma > 0 else np.zeros_like(g)
                    g = g + noise
                theta -= opt.direction(g) * lr if opt is not None else lr * g
                if monitor is not None:
                    monitor({"step": step, "contribution_norms": np.sqrt((grads**2).sum(axis=1)),
                             "noise": noise, "clip_norm": clip, "batch_size": len(idx)})
                step += 1
        self.coef_, self.intercept_ = theta[:-1], float(theta[-1])
        return step

    def pretrain(self, X, y, epochs=9, batch_size=32, learning_rate=3e-4, source="public"):
        """Non-private minibatch gradient descent (no privacy cost)."""
        X, y = check_X_y(X, y, dtype=float)
        if epochs < 1:
            raise ValueError("pretraining needs at least one epoch")
        if len(np.unique(y)) < 2:
            raise ValueError("pretraining data has a single class")
        self._ensure_weights(X.shape[1])
        self._sgd(X, y, epochs, batch_size, learning_rate, None, None, stream=1)
        self.provenance_.append({"stage": "pretrain", "source": source, "epochs": epochs,
                                 "batch_size": batch_size, "lr": learning_rate})
        return self

    def steps_for(self, n: int) -> int:
        return self.epochs * math.ceil(n / self.batch_size)

    def fit(self, X, y, source="private"):
        X, y = check_X_y(X, y, dtype=float)
        if len(np.unique(y)) < 2:
            raise ValueError("training data has a single class")
        self._ensure_weights(X.shape[1])
        if not self.private:
            self._sgd(X, y, self.epochs, self.batch_size, self.learning_rate, None, None, stream=2,
                      monitor=self.monitor)
            self.provenance_.append({"stage": "train", "source": source, "private": False})
            return self
        steps = self.steps_for(len(y))
        if self.noise_multiplier is None:
            sigma = calibrate_sigma(self.epsilon, self.delta, steps)
        else:
            sigma = float(self.noise_multiplier)
        clip = float(self.clip_norm)
        self._sgd(X, y, self.epochs, self.batch_size, self.learning_rate, clip, sigma, stream=2,
                  monitor=self.monitor)
        rho = gaussian_rho(sigma, steps)
        spent = zcdp_epsilon(rho, self.delta) if math.isfinite(rho) else math.inf
        self.privacy_ledger_.append({"epsilon": spent, "target_epsilon": self.epsilon, "delta": self.delta,
                                     "sigma": sigma, "clip_norm": clip, "steps": steps, "rho": rho})
        self.provenance_.append({"stage": "dp_finetune", "source": source, "epsilon": spent})
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {"coef": self.coef_.tolist(), "intercept": self.intercept_, "params": self.get_params(),
                "provenance": self.provenance_, "privacy_ledger": self.privacy_ledger_}


def auc(scores, y) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(y)
    n1 = int((y == 1).sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes in the test set")
    ranks = rankdata(scores)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# Functional wrappers around the estimator

def pretrain(model: DPLogisticClassifier, data: Dataset, target: str, params: PretrainParams) -> DPLogisticClassifier:
    X, y = encode_features(data, target)
    return model.pretrain(X, y, params.pre_num_epochs, params.pre_batch_size, params.pre_lr, source=data.role)


def dp_finetune(model: DPLogisticClassifier, data: Dataset, target: str, params: DpSgdParams,
                budget: PrivacyBudget) -> DPLogisticClassifier:
    model.set_params(epsilon=budget.epsilon, delta=budget.delta or DEFAULT_DELTA, epochs=params.dp_num_epochs,
                     batch_size=params.dp_batch_size, learning_rate=params.dp_lr, clip_norm=params.clip_norm,
                     private=True)
    X, y = encode_features(data, target)
    return model.fit(X, y, source=data.role)


@dataclass(frozen=True)
class FinetuneRun:
    auc: float
    epsilon: float
    test_id: str
    pretrained_on: str | None = None


def evaluate_run(model: DPLogisticClassifier, test: Dataset, target: str, epsilon: float,
                 pretrained_on: str | None = None) -> FinetuneRun:
    X, y = encode_features(test, target)
    return FinetuneRun(auc(model.decision_function(X), y), epsilon, split_id(test), pretrained_on)


def auc_advantage(pretrained: FinetuneRun, baseline: FinetuneRun) -> float:
    """AUC gain from public pretraining on the same private test split and epsilon."""
    if pretrained.test_id != baseline.test_id:
        raise ValueError("runs were evaluated on different test splits")
    if pretrained.epsilon != baseline.epsilon:
        raise ValueError("runs used different privacy budgets")
    return pretrained.auc - baseline.auc
