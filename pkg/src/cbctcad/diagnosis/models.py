"""Standardised linear models trained by full-batch gradient descent on cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, TrainingFailureError


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 600
    lr: float = 0.05
    l2: float = 1e-3
    seed: int = 0


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order that depends only on the multiset of (features, label) rows,
    which makes every reduction independent of the caller's sample order."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys[::-1])


def softmax_loss_grad(W, b, X, y, l2):
    """Mean cross-entropy plus ``l2/2 |W|^2`` and its gradients.

    W: (F, C), b: (C,), X: (N, F), y: (N,) integer labels.
    """
    n = X.shape[0]
    P = softmax(X @ W + b)
    loss = -np.mean(np.log(np.clip(P[np.arange(n), y], 1e-300, None))) + 0.5 * l2 * np.sum(W * W)
    G = P.copy()
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, X.T @ G + l2 * W, G.sum(axis=0)


@dataclass
class LinearSoftmax:
    """Standardisation followed by an affine map and softmax."""

    standardizer: Standardizer
    W: np.ndarray
    b: np.ndarray
    loss_history: tuple = ()

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.standardizer(np.atleast_2d(X)) @ self.W + self.b

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def arrays(self, prefix: str) -> dict:
        return {
            f"{prefix}.mean": self.standardizer.mean,
            f"{prefix}.scale": self.standardizer.scale,
            f"{prefix}.W": self.W,
            f"{prefix}.b": self.b,
        }

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str) -> "LinearSoftmax":
        std = Standardizer(arrays[f"{prefix}.mean"], arrays[f"{prefix}.scale"])
        return cls(std, arrays[f"{prefix}.W"], arrays[f"{prefix}.b"])


def fit_softmax(X, y, n_classes: int, config: FitConfig = FitConfig()) -> LinearSoftmax:
    """Full-batch Adam on the regularised cross-entropy.

    Rows are put into a canonical order first, so permuting the input samples
    leaves the result bit-for-bit unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise InvalidArgumentError("X must be (N, F) with one label per row")
    present = np.unique(y)
    if present.size < n_classes:
        raise TrainingFailureError(f"training labels cover classes {present.tolist()}, need all {n_classes}")
    order = canonical_order(X, y)
    X, y = X[order], y[order]
    std = Standardizer.fit(X)
    Z = std(X)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x50F7]))
    W = rng.normal(scale=0.01, size=(X.shape[1], n_classes))
    b = np.zeros(n_classes)
    m = [np.zeros_like(W), np.zeros_like(b)]
    v = [np.zeros_like(W), np.zeros_like(b)]
    history = []
    for t in range(1, config.iterations + 1):
        loss, gW, gb = softmax_loss_grad(W, b, Z, y, config.l2)
        if not np.isfinite(loss):
            raise TrainingFailureError(f"cross-entropy diverged at iteration {t}")
        history.append(loss)
        for k, (p, g) in enumerate(((W, gW), (b, gb))):
            m[k] = 0.9 * m[k] + 0.1 * g
            v[k] = 0.999 * v[k] + 0.001 * g * g
            p -= config.lr * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)
    final, _, _ = softmax_loss_grad(W, b, Z, y, config.l2)
    history.append(final)
    return LinearSoftmax(std, W, b, tuple(float(h) for h in history))
