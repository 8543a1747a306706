"""Per-device losses, gradients and prediction metrics.

Parameters are flat vectors. For the softmax classifier the layout is the
row-major ``(C, p)`` weight matrix followed by the ``C`` biases; for linear
regression it is the ``p`` weights followed by the intercept (if enabled).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    p: int
    n_classes: Optional[int] = None
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.kind is ModelKind.SOFTMAX and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("softmax classifier needs n_classes >= 2")

    @property
    def d(self) -> int:
        if self.kind is ModelKind.SOFTMAX:
            return self.n_classes * self.p + self.n_classes
        return self.p + (1 if self.intercept else 0)

    @property
    def maximize(self) -> bool:
        """True when larger prediction metric is better (accuracy)."""
        return self.kind is ModelKind.SOFTMAX

    @classmethod
    def linear(cls, p, intercept=True):
        return cls(ModelKind.LINEAR, p, None, intercept)

    @classmethod
    def softmax(cls, p, n_classes):
        return cls(ModelKind.SOFTMAX, p, n_classes)


def _check(spec, omega, X):
    if omega.shape != (spec.d,):
        raise ValueError(f"omega has shape {omega.shape}, expected ({spec.d},)")
    if X.ndim != 2 or X.shape[1] != spec.p:
        raise ValueError(f"features have shape {X.shape}, expected (n, {spec.p})")
    if X.shape[0] == 0:
        raise ValueError("empty sample subset")


def _unpack_softmax(spec, omega):
    C, p = spec.n_classes, spec.p
    return omega[:C * p].reshape(C, p), omega[C * p:]


def linear_predict(spec, omega, X):
    if spec.intercept:
        return X @ omega[:-1] + omega[-1]
    return X @ omega


def logits(spec, omega, X):
    W, b = _unpack_softmax(spec, omega)
    return X @ W.T + b


def loss_grad_arrays(spec: ModelSpec, omega, X, y, need_grad=True):
    """Mean loss over the rows of ``X`` and (optionally) its gradient."""
    n = X.shape[0]
    if spec.kind is ModelKind.LINEAR:
        r = linear_predict(spec, omega, X) - y
        f = float(r @ r) / n
        if not need_grad:
            return f, None
        g = np.empty(spec.d)
        if spec.intercept:
            g[:-1] = (2.0 / n) * (X.T @ r)
            g[-1] = (2.0 / n) * r.sum()
        else:
            g[:] = (2.0 / n) * (X.T @ r)
        return f, g
    Z = logits(spec, omega, X)
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    s = E.sum(axis=1)
    rows = np.arange(n)
    yi = np.asarray(y, dtype=np.int64)
    f = float(np.mean(np.log(s) - Z[rows, yi]))
    if not need_grad:
        return f, None
    P = E / s[:, None]
    P[rows, yi] -= 1.0
    P /= n
    C, p = spec.n_classes, spec.p
    g = np.empty(spec.d)
    g[:C * p] = (P.T @ X).ravel()
    g[C * p:] = P.sum(axis=0)
    return f, g


def metric_arrays(spec: ModelSpec, omega, X, y) -> float:
    if spec.kind is ModelKind.LINEAR:
        r = linear_predict(spec, omega, X) - y
        return float(np.sqrt(np.mean(r * r)))
    pred = np.argmax(logits(spec, omega, X), axis=1)
    return float(np.mean(pred == np.asarray(y, dtype=np.int64)))


def pooled_metric(spec: ModelSpec, values, counts) -> float:
    """Combine per-device metrics as if every held-out row were pooled.

    Accuracy is count-weighted; RMSE combines the per-device mean squared
    errors before taking the root.
    """
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(counts, dtype=np.float64)
    keep = w > 0
    if not keep.any():
        return float("nan")
    v, w = v[keep], w[keep]
    if spec.kind is ModelKind.LINEAR:
        return float(np.sqrt(np.sum(w * v * v) / w.sum()))
    return float(np.sum(w * v) / w.sum())


def _rows(data, subset):
    if subset is None:
        idx = np.arange(data.n)
    elif isinstance(subset, str):
        idx = getattr(data, subset)
    else:
        idx = np.asarray(subset, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("empty sample subset")
    return data.features[idx], data.targets[idx]


def loss(spec: ModelSpec, omega, data, subset="train") -> float:
    """Mean loss of ``omega`` on ``data`` restricted to ``subset``.

    ``subset`` is a split name (``"train"``, ``"val"``, ``"test"``), an index
    array, or ``None`` for every row.
    """
    omega = np.asarray(omega, dtype=np.float64)
    X, y = _rows(data, subset)
    _check(spec, omega, X)
    return loss_grad_arrays(spec, omega, X, y, need_grad=False)[0]


def grad(spec: ModelSpec, omega, data, subset="train") -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    X, y = _rows(data, subset)
    _check(spec, omega, X)
    return loss_grad_arrays(spec, omega, X, y)[1]


def predict_metric(spec: ModelSpec, omega, data, subset="test") -> float:
    """Accuracy for the classifier, RMSE for regression."""
    omega = np.asarray(omega, dtype=np.float64)
    X, y = _rows(data, subset)
    _check(spec, omega, X)
    return metric_arrays(spec, omega, X, y)


def smoothness_constant(spec: ModelSpec, X) -> float:
    """Gradient Lipschitz constant of the mean squared loss on ``X``.

    Largest eigenvalue of ``(2/n) A^T A`` where ``A`` is the design including
    the intercept column. Only defined for linear regression.
    """
    if spec.kind is not ModelKind.LINEAR:
        raise ValueError("closed-form smoothness constant only for linear regression")
    A = design_matrix(spec, X)
    return float(np.linalg.eigvalsh((2.0 / A.shape[0]) * (A.T @ A))[-1])


def design_matrix(spec: ModelSpec, X):
    X = np.asarray(X, dtype=np.float64)
    if spec.kind is ModelKind.LINEAR and spec.intercept:
        return np.hstack([X, np.ones((X.shape[0], 1))])
    return X
