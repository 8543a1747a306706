"""Post-hoc cluster extraction, partition agreement and the oracle estimator."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.linalg

from .core import FPFCError, pair_arrays
from .losses import ModelKind, design_matrix
from . import _kernels


class SingularDesignError(FPFCError, np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    n_clusters: int
    fused_models: np.ndarray

    def to_record(self) -> dict:
        return {
            "num_clusters": int(self.n_clusters),
            "device_cluster": [int(v) for v in self.labels],
            "clusters": [
                {"id": l,
                 "members": [int(i) for i in np.flatnonzero(self.labels == l)],
                 "fused_model": [float(x) for x in self.fused_models[l]]}
                for l in range(self.n_clusters)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ClusterAssignment":
        labels = np.asarray(rec["device_cluster"], dtype=np.int64)
        fused = np.array([c["fused_model"] for c in rec["clusters"]], dtype=np.float64)
        return cls(labels, int(rec["num_clusters"]), fused)


def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def components_from_edges(m: int, I, J, edge_mask) -> np.ndarray:
    """Union-find connected components; ids ordered by smallest member."""
    parent = list(range(m))
    for i, j in zip(np.asarray(I)[edge_mask], np.asarray(J)[edge_mask]):
        ri, rj = _find(parent, int(i)), _find(parent, int(j))
        if ri != rj:
            if ri < rj:
                parent[rj] = ri
            else:
                parent[ri] = rj
    roots = [_find(parent, i) for i in range(m)]
    relabel = {}
    labels = np.empty(m, dtype=np.int64)
    for i, r in enumerate(roots):
        labels[i] = relabel.setdefault(r, len(relabel))
    return labels


def labels_from_theta(theta: np.ndarray, m: int, nu: float) -> np.ndarray:
    I, J = pair_arrays(m)
    if m < 2:
        return np.zeros(m, dtype=np.int64)
    norms = _kernels.backend.row_norms(theta)
    return components_from_edges(m, I, J, norms <= nu)


def fuse_models(labels, omega, sample_sizes) -> np.ndarray:
    """Sample-size-weighted mean parameter vector of each cluster."""
    omega = np.asarray(omega, dtype=np.float64)
    w = np.asarray(sample_sizes, dtype=np.float64)
    L = int(labels.max()) + 1 if len(labels) else 0
    out = np.empty((L, omega.shape[1]))
    for l in range(L):
        members = np.flatnonzero(labels == l)
        if len(members) == 1:
            out[l] = omega[members[0]]
        else:
            ww = w[members]
            out[l] = (ww[:, None] * omega[members]).sum(axis=0) / ww.sum()
    return out


def extract_clusters(pairwise, sample_sizes, omega, nu: float = 0.1) -> ClusterAssignment:
    """Link devices ``i, j`` whenever ``||theta_ij|| <= nu`` and take components."""
    if nu < 0:
        raise ValueError("nu must be >= 0")
    omega = getattr(omega, "per_device", omega)
    labels = labels_from_theta(pairwise.theta, pairwise.m, nu)
    fused = fuse_models(labels, omega, sample_sizes)
    return ClusterAssignment(labels, fused.shape[0], fused)


def adjusted_rand_index(pred, truth) -> float:
    """Pair-counting adjusted Rand index between two labelings."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("labelings must have equal length")
    n = len(pred)
    if n < 2:
        raise ValueError("ARI needs at least two items")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    index = sum(comb(int(v), 2) for v in table.ravel())
    a = sum(comb(int(v), 2) for v in table.sum(axis=1))
    b = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = a * b / total
    max_index = (a + b) / 2
    if max_index == expected:
        return 1.0 if index == max_index else 0.0
    return float((index - expected) / (max_index - expected))


def oracle_estimator(federation, labels=None, subset="train") -> np.ndarray:
    """Least-squares cluster parameters with the partition known.

    Each device's rows are weighted by ``1/n_i``, so cluster ``l`` solves
    ``(sum_i A_i^T A_i / n_i) alpha = sum_i A_i^T y_i / n_i``.
    """
    spec = federation.spec
    if spec.kind is not ModelKind.LINEAR:
        raise ValueError("oracle estimator is defined for linear regression only")
    labels = federation.true_labels if labels is None else np.asarray(labels)
    if labels is None:
        raise ValueError("a known partition is required")
    L = int(labels.max()) + 1
    out = np.empty((L, spec.d))
    for l in range(L):
        G = np.zeros((spec.d, spec.d))
        r = np.zeros(spec.d)
        for i in np.flatnonzero(labels == l):
            dev = federation.devices[i]
            idx = getattr(dev, subset) if isinstance(subset, str) else np.arange(dev.n)
            A = design_matrix(spec, dev.features[idx])
            y = dev.targets[idx]
            n_i = len(idx)
            G += A.T @ A / n_i
            r += A.T @ y / n_i
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= ev[-1] * 1e-14 or ev[-1] == 0:
            raise SingularDesignError(f"cluster {l}: stacked design is rank deficient")
        if ev[-1] / ev[0] > 1e10:
            warnings.warn(f"cluster {l}: ill-conditioned design (cond={ev[-1] / ev[0]:.2e})")
        out[l] = scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), r)
    return out


def oracle_device_params(federation, labels=None, subset="train") -> np.ndarray:
    """Oracle estimate broadcast to every device, shape ``(m, d)``."""
    labels = federation.true_labels if labels is None else np.asarray(labels)
    return oracle_estimator(federation, labels, subset)[labels]
