"""Shared domain types, pair indexing and small vector helpers."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class FPFCError(Exception):
    """Base class for errors raised by the package."""


class InvalidPairError(FPFCError, ValueError):
    pass


class InvalidHyperparameterError(FPFCError, ValueError):
    """``field`` names the offending hyperparameter when there is one."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ProtocolError(FPFCError):
    pass


class DivergenceError(FPFCError, FloatingPointError):
    def __init__(self, message, device=None, round=None):
        ctx = []
        if device is not None:
            ctx.append(f"device {device}")
        if round is not None:
            ctx.append(f"round {round}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.device = None if device is None else int(device)
        self.round = None if round is None else int(round)


# ---------------------------------------------------------------------------
# pair indexing
# ---------------------------------------------------------------------------

def pair_index(i: int, j: int, m: int) -> tuple[tuple[int, int], int]:
    """Canonical key ``(min, max)`` and the sign of ``(i, j)`` relative to it.

    Only pairs with ``i < j`` are ever stored; the value of ``(j, i)`` is the
    negation of the stored ``(i, j)`` value.
    """
    if not (0 <= i < m and 0 <= j < m):
        raise InvalidPairError(f"pair ({i}, {j}) out of range for m={m}")
    if i == j:
        raise InvalidPairError(f"diagonal pair ({i}, {i}) is never stored")
    if i < j:
        return (i, j), 1
    return (j, i), -1


def n_pairs(m: int) -> int:
    return m * (m - 1) // 2


def pair_offset(i: int, j: int, m: int) -> int:
    """Row of the canonical pair ``(i, j)``, ``i < j``, in row-major upper-triangle order."""
    return i * m - i * (i + 1) // 2 + (j - i - 1)


def pair_arrays(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint arrays ``(I, J)`` of every stored pair, in storage order."""
    I, J = np.triu_indices(m, k=1)
    return I.astype(np.int64), J.astype(np.int64)


def rows_touching(m: int) -> np.ndarray:
    """``(m, m-1)`` table: row ``i`` lists the storage rows of all pairs containing device ``i``."""
    out = np.empty((m, max(m - 1, 0)), dtype=np.int64)
    for i in range(m):
        c = 0
        for j in range(m):
            if j == i:
                continue
            a, b = (i, j) if i < j else (j, i)
            out[i, c] = pair_offset(a, b, m)
            c += 1
    return out


def l2_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(math.sqrt(float(np.dot(x.ravel(), x.ravel()))))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Stacked per-device parameter vectors, shape ``(m, d)``."""

    per_device: np.ndarray

    def __post_init__(self):
        arr = np.array(self.per_device, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError("per_device must be a sequence of equal-length vectors")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameters must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "per_device", arr)

    @property
    def m(self) -> int:
        return self.per_device.shape[0]

    @property
    def d(self) -> int:
        return self.per_device.shape[1]

    @classmethod
    def replicated(cls, omega0, m: int) -> "ModelParams":
        return cls(np.tile(np.asarray(omega0, dtype=np.float64), (m, 1)))


@dataclass
class PairwiseState:
    """Auxiliary differences ``theta_ij`` and duals ``v_ij`` for ``i < j``.

    Rows follow :func:`pair_arrays` order. ``theta_ji`` and ``v_ji`` are the
    negations of the stored rows and are never materialised.
    """

    theta: np.ndarray
    dual: np.ndarray
    rho: float
    m: int

    def __post_init__(self):
        P = n_pairs(self.m)
        if self.theta.shape[0] != P or self.dual.shape != self.theta.shape:
            raise ValueError(f"expected {P} stored pairs for m={self.m}")
        if not self.rho > 0:
            raise InvalidHyperparameterError("rho must be positive")

    @classmethod
    def zeros(cls, m: int, d: int, rho: float) -> "PairwiseState":
        P = n_pairs(m)
        return cls(np.zeros((P, d)), np.zeros((P, d)), float(rho), m)

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def _get(self, arr, i, j):
        if i == j:
            return np.zeros(arr.shape[1])
        (a, b), sign = pair_index(i, j, self.m)
        row = arr[pair_offset(a, b, self.m)]
        return row.copy() if sign > 0 else -row

    def theta_of(self, i: int, j: int) -> np.ndarray:
        return self._get(self.theta, i, j)

    def dual_of(self, i: int, j: int) -> np.ndarray:
        return self._get(self.dual, i, j)

    def copy(self) -> "PairwiseState":
        return PairwiseState(self.theta.copy(), self.dual.copy(), self.rho, self.m)


# ---------------------------------------------------------------------------
# local-epoch schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    T: int

    def epochs(self, device: int, k: int) -> int:
        return self.T


@dataclass(frozen=True)
class PerDevice:
    T: tuple

    def epochs(self, device: int, k: int) -> int:
        return self.T[device]


@dataclass(frozen=True)
class Growing:
    """``T = ceil(k / c)`` (``c > 0``) or ``T = k + 1`` (``c == 0``), never below 1."""

    c: int = 20

    def epochs(self, device: int, k: int) -> int:
        if self.c == 0:
            return k + 1
        return max(1, math.ceil(k / self.c))


EpochRule = Union[Constant, PerDevice, Growing]


def as_epoch_rule(value) -> EpochRule:
    """Accept an int, a per-device sequence, an existing rule or a string
    such as ``"ceil:20"`` / ``"linear"``."""
    if isinstance(value, (Constant, PerDevice, Growing)):
        return value
    if isinstance(value, (int, np.integer)):
        return Constant(int(value))
    if isinstance(value, str):
        if value == "linear":
            return Growing(0)
        if value.startswith("ceil:"):
            return Growing(int(value.split(":", 1)[1]))
        return Constant(int(value))
    if isinstance(value, Sequence):
        return PerDevice(tuple(int(t) for t in value))
    raise InvalidHyperparameterError(f"unrecognised local epoch rule {value!r}", "local_epochs")


def _check_rule(rule: EpochRule):
    if isinstance(rule, Constant) and rule.T < 1:
        raise InvalidHyperparameterError("local_epochs must be >= 1", "local_epochs")
    if isinstance(rule, PerDevice) and min(rule.T, default=1) < 1:
        raise InvalidHyperparameterError("local_epochs must be >= 1", "local_epochs")
    if isinstance(rule, Growing) and rule.c < 0:
        raise InvalidHyperparameterError("growing rule constant must be >= 0", "local_epochs")


@dataclass(frozen=True)
class HyperParams:
    lam: float = 0.5
    a: float = 3.7
    xi: float = 1e-4
    rho: float = 1.0
    alpha: float = 0.1
    local_epochs: EpochRule = field(default_factory=lambda: Constant(10))
    tau: float = 1.0
    nu: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "local_epochs", as_epoch_rule(self.local_epochs))
        for name in ("lam", "a", "xi", "rho", "alpha", "tau", "nu"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidHyperparameterError(f"{name} must be finite", name)
        if self.lam < 0:
            raise InvalidHyperparameterError("lam must be >= 0", "lam")
        if self.a <= 1:
            raise InvalidHyperparameterError("a must be > 1", "a")
        if self.lam > 0 and not (0 < self.xi < self.lam):
            raise InvalidHyperparameterError(
                f"xi must satisfy 0 < xi < lambda (xi={self.xi}, lambda={self.lam})", "xi")
        if self.rho <= 0:
            raise InvalidHyperparameterError("rho must be > 0", "rho")
        if self.alpha <= 0:
            raise InvalidHyperparameterError("alpha must be > 0", "alpha")
        if not (0 < self.tau <= 1):
            raise InvalidHyperparameterError("tau must lie in (0, 1]", "tau")
        if self.nu < 0 or (self.lam > 0 and self.nu < self.xi):
            raise InvalidHyperparameterError("nu must satisfy nu >= xi", "nu")
        _check_rule(self.local_epochs)

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RoundTrace:
    round: int
    active_set: tuple
    lambda_current: float
    train_loss: float
    val_metric: float
    test_metric: float
    aug_lagrangian: float
    num_clusters: int
    ari: float
    sim_time_s: float = 0.0
    wall_ms: float = 0.0

    @property
    def active_count(self) -> int:
        return len(self.active_set)
