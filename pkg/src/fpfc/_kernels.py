"""Pair-loop kernels for the server side of the algorithm.

Every kernel has a compiled (numba) and a pure-numpy implementation with the
same signature. The compiled path is used when numba imports and the
environment variable ``FPFC_NUMBA`` is not set to ``0``.
"""
from __future__ import annotations

import os

import numpy as np

from .penalty import (PenaltyKind, shrink_factors, shrink_group_l1,
                      shrink_smoothed_scad)

try:  # pragma: no cover - exercised implicitly
    import numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False


def numba_requested() -> bool:
    return os.environ.get("FPFC_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def server_update_rows_np(omega, theta, dual, I, J, rows, lam, a, xi, rho, kind):
    """Update ``theta``/``dual`` in place for the storage rows in ``rows``."""
    if len(rows) == 0:
        return
    diff = omega[I[rows]] - omega[J[rows]]
    delta = diff + dual[rows] / rho
    norms = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    c = shrink_factors(norms, lam, a, xi, rho, kind)
    new_theta = c[:, None] * delta
    theta[rows] = new_theta
    dual[rows] = dual[rows] + rho * (diff - new_theta)


def zeta_all_np(omega, theta, dual, I, J, rho):
    m, d = omega.shape
    u = theta - dual / rho
    acc = np.zeros((m, d))
    np.add.at(acc, I, u)
    np.add.at(acc, J, -u)
    return (omega.sum(axis=0)[None, :] + acc) / m


def zeta_one_np(i, omega, theta, dual, I, rows_i, rho):
    m = omega.shape[0]
    sign = np.where(I[rows_i] == i, 1.0, -1.0)
    u = (theta[rows_i] - dual[rows_i] / rho) * sign[:, None]
    return (omega.sum(axis=0) + u.sum(axis=0)) / m


def pair_terms_np(omega, theta, dual, I, J):
    r = omega[I] - omega[J] - theta
    tn = np.sqrt(np.einsum("ij,ij->i", theta, theta))
    inner = np.einsum("ij,ij->i", dual, r)
    rsq = np.einsum("ij,ij->i", r, r)
    return tn, inner, rsq


def pairwise_distances_np(omega):
    # explicit differences; the Gram-matrix shortcut loses small distances
    m = omega.shape[0]
    out = np.empty((m, m))
    for i in range(m):
        out[i] = np.sqrt(((omega - omega[i]) ** 2).sum(axis=1))
    return out


def row_norms_np(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    _shrink_scad_jit = _jit(shrink_smoothed_scad)
    _shrink_l1_jit = _jit(shrink_group_l1)

    @numba.njit(cache=True, nogil=True)
    def server_update_rows_nb(omega, theta, dual, I, J, rows, lam, a, xi, rho, kind):
        d = omega.shape[1]
        delta = np.empty(d)
        for r in range(rows.shape[0]):
            p = rows[r]
            i = I[p]
            j = J[p]
            s = 0.0
            for k in range(d):
                v = omega[i, k] - omega[j, k] + dual[p, k] / rho
                delta[k] = v
                s += v * v
            nrm = np.sqrt(s)
            if kind == 1:
                c = _shrink_l1_jit(nrm, lam, rho)
            else:
                c = _shrink_scad_jit(nrm, lam, a, xi, rho)
            for k in range(d):
                t = c * delta[k]
                theta[p, k] = t
                dual[p, k] = dual[p, k] + rho * (omega[i, k] - omega[j, k] - t)

    @numba.njit(cache=True, nogil=True)
    def zeta_all_nb(omega, theta, dual, I, J, rho):
        m, d = omega.shape
        acc = np.zeros((m, d))
        P = I.shape[0]
        for p in range(P):
            i = I[p]
            j = J[p]
            for k in range(d):
                u = theta[p, k] - dual[p, k] / rho
                acc[i, k] += u
                acc[j, k] -= u
        tot = np.zeros(d)
        for i in range(m):
            for k in range(d):
                tot[k] += omega[i, k]
        for i in range(m):
            for k in range(d):
                acc[i, k] = (tot[k] + acc[i, k]) / m
        return acc

    @numba.njit(cache=True, nogil=True)
    def zeta_one_nb(i, omega, theta, dual, I, rows_i, rho):
        m, d = omega.shape
        out = np.zeros(d)
        for j in range(m):
            for k in range(d):
                out[k] += omega[j, k]
        for r in range(rows_i.shape[0]):
            p = rows_i[r]
            sgn = 1.0 if I[p] == i else -1.0
            for k in range(d):
                out[k] += sgn * (theta[p, k] - dual[p, k] / rho)
        for k in range(d):
            out[k] /= m
        return out

    @numba.njit(cache=True, nogil=True)
    def pair_terms_nb(omega, theta, dual, I, J):
        P, d = theta.shape
        tn = np.empty(P)
        inner = np.empty(P)
        rsq = np.empty(P)
        for p in range(P):
            i = I[p]
            j = J[p]
            a = 0.0
            b = 0.0
            c = 0.0
            for k in range(d):
                r = omega[i, k] - omega[j, k] - theta[p, k]
                a += theta[p, k] * theta[p, k]
                b += dual[p, k] * r
                c += r * r
            tn[p] = np.sqrt(a)
            inner[p] = b
            rsq[p] = c
        return tn, inner, rsq

    @numba.njit(cache=True, nogil=True)
    def pairwise_distances_nb(omega):
        m, d = omega.shape
        out = np.zeros((m, m))
        for i in range(m):
            for j in range(i + 1, m):
                s = 0.0
                for k in range(d):
                    v = omega[i, k] - omega[j, k]
                    s += v * v
                out[i, j] = np.sqrt(s)
                out[j, i] = out[i, j]
        return out

    @numba.njit(cache=True, nogil=True)
    def row_norms_nb(x):
        n, d = x.shape
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += x[i, k] * x[i, k]
            out[i] = np.sqrt(s)
        return out


class _Backend:
    """Kernel table resolved once at import (or on :func:`set_backend`)."""

    def __init__(self, use_numba: bool):
        self.use_numba = bool(use_numba and _HAVE_NUMBA)
        if self.use_numba:
            self._server = server_update_rows_nb
            self.zeta_all = zeta_all_nb
            self._zeta_one = zeta_one_nb
            self.pair_terms = pair_terms_nb
            self.pairwise_distances = pairwise_distances_nb
            self.row_norms = row_norms_nb
        else:
            self._server = server_update_rows_np
            self.zeta_all = zeta_all_np
            self._zeta_one = zeta_one_np
            self.pair_terms = pair_terms_np
            self.pairwise_distances = pairwise_distances_np
            self.row_norms = row_norms_np

    @property
    def name(self) -> str:
        return "numba" if self.use_numba else "numpy"

    def server_update_rows(self, omega, theta, dual, I, J, rows, lam, a, xi, rho, kind):
        self._server(omega, theta, dual, I, J, np.asarray(rows, dtype=np.int64),
                     float(lam), float(a), float(xi), float(rho), int(PenaltyKind(kind)))

    def zeta_one(self, i, omega, theta, dual, I, rows_i, rho):
        return self._zeta_one(int(i), omega, theta, dual, I, rows_i, float(rho))


backend = _Backend(numba_requested())


def set_backend(use_numba: bool) -> _Backend:
    """Switch kernel implementations at runtime (tests and benchmarks)."""
    global backend
    backend = _Backend(use_numba)
    return backend


def get_backend(use_numba: bool | None = None) -> _Backend:
    if use_numba is None:
        return backend
    return _Backend(use_numba)
