"""SCAD, smoothed SCAD and the group proximal maps used by the server.

All proximal maps here act on a vector ``delta`` and return a nonnegative
multiple of it; the scalar multiplier only depends on ``||delta||``, so the
same branch logic is shared with the compiled pair kernels.
"""
from __future__ import annotations

import enum

import numpy as np

from .core import InvalidHyperparameterError, l2_norm


class PenaltyKind(enum.IntEnum):
    SMOOTHED_SCAD = 0
    GROUP_L1 = 1

    @classmethod
    def parse(cls, value) -> "PenaltyKind":
        if isinstance(value, PenaltyKind):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"scad": cls.SMOOTHED_SCAD, "smoothed_scad": cls.SMOOTHED_SCAD,
                   "fpfc": cls.SMOOTHED_SCAD, "l1": cls.GROUP_L1,
                   "group_l1": cls.GROUP_L1, "fpfc_l1": cls.GROUP_L1}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown penalty kind {value!r}") from None


def _check_xi(lam, xi):
    if lam > 0 and not (0 < xi < lam):
        raise InvalidHyperparameterError(
            f"smoothed SCAD needs 0 < xi < lambda, got xi={xi}, lambda={lam}")


def scad(t, lam: float, a: float):
    """SCAD penalty ``P_a(t, lam)``; vectorised over ``t``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    if lam == 0:
        return np.zeros_like(t)[()]
    mid = (a * lam * t - 0.5 * (t * t + lam * lam)) / (a - 1)
    out = np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, lam * lam * (a + 1) / 2))
    return out[()]


def smoothed_scad(t, lam: float, a: float, xi: float):
    """Quadratic-near-zero SCAD surrogate; continuously differentiable."""
    _check_xi(lam, xi)
    t = np.abs(np.asarray(t, dtype=np.float64))
    if lam == 0:
        return np.zeros_like(t)[()]
    quad = lam / (2 * xi) * t * t + xi * lam / 2
    return np.where(t <= xi, quad, scad(t, lam, a))[()]


def smoothed_scad_deriv(t, lam: float, a: float, xi: float):
    _check_xi(lam, xi)
    t = np.asarray(t, dtype=np.float64)
    if lam == 0:
        return np.zeros_like(t)[()]
    s, at = np.sign(t), np.abs(t)
    out = np.where(
        at <= xi, lam / xi * t,
        np.where(at <= lam, lam * s,
                 np.where(at <= a * lam, (a * lam - at) / (a - 1) * s, 0.0)))
    return out[()]


def smoothed_scad_lipschitz(lam: float, a: float, xi: float) -> float:
    return max(lam / xi, 1.0 / (a - 1))


# ---------------------------------------------------------------------------
# scalar shrinkage factors (plain python so numba can compile them verbatim)
# ---------------------------------------------------------------------------

def shrink_smoothed_scad(nrm, lam, a, xi, rho):
    """Multiplier ``c`` with ``prox(delta) = c * delta`` for ``||delta|| = nrm``.

    Branches are tested in order, so a norm sitting exactly on a shared
    boundary takes the earlier formula.
    """
    if lam == 0.0:
        return 1.0
    if nrm == 0.0:
        return 0.0
    if nrm <= xi + lam / rho:
        return xi * rho / (lam + xi * rho)
    if nrm <= lam + lam / rho:
        return 1.0 - lam / (rho * nrm)
    if nrm <= a * lam:
        num = 1.0 - a * lam / ((a - 1.0) * rho * nrm)
        if num < 0.0:
            num = 0.0
        return num / (1.0 - 1.0 / ((a - 1.0) * rho))
    return 1.0


def shrink_group_l1(nrm, lam, rho):
    if nrm == 0.0:
        return 0.0
    c = 1.0 - lam / (rho * nrm)
    return c if c > 0.0 else 0.0


def shrink_scad(nrm, lam, a, rho):
    """Multiplier for the proximal map of the unsmoothed SCAD penalty."""
    if lam == 0.0:
        return 1.0
    if nrm == 0.0:
        return 0.0
    if nrm <= lam + lam / rho:
        c = 1.0 - lam / (rho * nrm)
        return c if c > 0.0 else 0.0
    if nrm <= a * lam:
        num = 1.0 - a * lam / ((a - 1.0) * rho * nrm)
        if num < 0.0:
            num = 0.0
        return num / (1.0 - 1.0 / ((a - 1.0) * rho))
    return 1.0


def shrink_factors(norms, lam, a, xi, rho, kind=PenaltyKind.SMOOTHED_SCAD):
    """Vectorised multipliers for an array of norms (numpy path)."""
    n = np.asarray(norms, dtype=np.float64)
    if kind == PenaltyKind.GROUP_L1:
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.maximum(0.0, 1.0 - lam / (rho * n))
        return np.where(n == 0.0, 0.0, c)
    if lam == 0.0:
        return np.ones_like(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        b2 = 1.0 - lam / (rho * n)
        b3 = np.maximum(0.0, 1.0 - a * lam / ((a - 1.0) * rho * n)) / (1.0 - 1.0 / ((a - 1.0) * rho))
    out = np.select(
        [n == 0.0, n <= xi + lam / rho, n <= lam + lam / rho, n <= a * lam],
        [0.0, xi * rho / (lam + xi * rho), b2, b3],
        default=1.0,
    )
    return out


def _check_prox_params(lam, a, rho):
    if lam > 0 and (a - 1.0) * rho <= 1.0:
        raise InvalidHyperparameterError(
            f"SCAD proximal map needs (a-1)*rho > 1, got a={a}, rho={rho}")


def prox_smoothed_scad(delta, hp) -> np.ndarray:
    """``argmin_theta  g~(||theta||) + rho/2 ||delta - theta||^2``.

    ``hp`` is anything exposing ``lam``, ``a``, ``xi`` and ``rho``.
    """
    _check_xi(hp.lam, hp.xi)
    _check_prox_params(hp.lam, hp.a, hp.rho)
    delta = np.asarray(delta, dtype=np.float64)
    c = shrink_smoothed_scad(l2_norm(delta), hp.lam, hp.a, hp.xi, hp.rho)
    return c * delta


def prox_group_l1(delta, lam: float, rho: float) -> np.ndarray:
    """Group soft-threshold ``max(0, 1 - lam/(rho ||delta||)) delta``."""
    if rho <= 0:
        raise InvalidHyperparameterError("rho must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    return shrink_group_l1(l2_norm(delta), lam, rho) * delta


def prox_scad(delta, lam: float, a: float, rho: float = 1.0) -> np.ndarray:
    _check_prox_params(lam, a, rho)
    delta = np.asarray(delta, dtype=np.float64)
    return shrink_scad(l2_norm(delta), lam, a, rho) * delta


def penalty_value(t, hp, kind=PenaltyKind.SMOOTHED_SCAD):
    """Fusion penalty used inside the augmented Lagrangian for ``kind``."""
    if PenaltyKind(kind) == PenaltyKind.GROUP_L1:
        return hp.lam * np.abs(np.asarray(t, dtype=np.float64))
    return smoothed_scad(t, hp.lam, hp.a, hp.xi)


def exact_penalty_value(t, hp, kind=PenaltyKind.SMOOTHED_SCAD):
    """Unsmoothed penalty ``g`` of the original objective."""
    if PenaltyKind(kind) == PenaltyKind.GROUP_L1:
        return hp.lam * np.abs(np.asarray(t, dtype=np.float64))
    return scad(t, hp.lam, hp.a)


__all__ = [
    "PenaltyKind", "scad", "smoothed_scad", "smoothed_scad_deriv",
    "smoothed_scad_lipschitz", "prox_smoothed_scad", "prox_group_l1",
    "prox_scad", "shrink_smoothed_scad", "shrink_group_l1", "shrink_scad",
    "shrink_factors", "penalty_value", "exact_penalty_value",
]
