"""Federations: synthetic generators, CSV ingestion, splits and bundles."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FPFCError
from .losses import ModelKind, ModelSpec

DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)


class DataError(FPFCError):
    pass


class CsvParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class InvalidSplitError(DataError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DeviceData:
    features: np.ndarray
    targets: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if n < 1:
            raise DataError("a device needs at least one sample")
        if self.targets.shape[0] != n:
            raise DataError("features and targets disagree on sample count")
        parts = [np.asarray(s, dtype=np.int64) for s in (self.train, self.val, self.test)]
        allidx = np.concatenate(parts)
        if len(np.unique(allidx)) != len(allidx):
            raise InvalidSplitError("train/val/test splits overlap")
        if len(allidx) and (allidx.min() < 0 or allidx.max() >= n):
            raise InvalidSplitError("split index out of range")
        for name, arr in zip(("train", "val", "test"), parts):
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_train(self) -> int:
        return len(self.train)

    @classmethod
    def unsplit(cls, features, targets) -> "DeviceData":
        """Every row in the training split."""
        n = len(targets)
        empty = np.empty(0, dtype=np.int64)
        return cls(np.asarray(features, dtype=np.float64), np.asarray(targets),
                   np.arange(n), empty, empty)


@dataclass(frozen=True, eq=False)
class Federation:
    devices: list
    spec: ModelSpec
    true_labels: Optional[np.ndarray] = None
    true_params: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        ps = {dev.features.shape[1] for dev in self.devices}
        if len(ps) > 1:
            raise SchemaError(f"devices disagree on feature dimension: {sorted(ps)}")
        if ps and ps.pop() != self.spec.p:
            raise SchemaError("feature dimension does not match the model spec")
        if self.true_labels is not None:
            lab = np.asarray(self.true_labels, dtype=np.int64)
            if len(lab) != len(self.devices):
                raise DataError("true_labels must have one entry per device")
            object.__setattr__(self, "true_labels", lab)

    @property
    def m(self) -> int:
        return len(self.devices)

    def sample_sizes(self, subset="train") -> np.ndarray:
        if subset == "all":
            return np.array([dev.n for dev in self.devices])
        return np.array([len(getattr(dev, subset)) for dev in self.devices])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(device: DeviceData, fractions=DEFAULT_FRACTIONS, seed=0) -> DeviceData:
    """Seeded shuffle, then contiguous train/val/test slices.

    Validation and test sizes are rounded from their fractions; the training
    split takes the remainder so the three sets always cover every row.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise InvalidSplitError(f"fractions must be three positive numbers summing to <= 1: {fractions}")
    n = device.n
    n_val = _round_half_up(fractions[1] * n)
    n_test = _round_half_up(fractions[2] * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise InvalidSplitError(f"{n} samples cannot fill splits {fractions} without an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    return DeviceData(device.features, device.targets,
                      np.sort(perm[:n_train]),
                      np.sort(perm[n_train:n_train + n_val]),
                      np.sort(perm[n_train + n_val:]))


# ---------------------------------------------------------------------------
# synthetic softmax federations
# ---------------------------------------------------------------------------

SCENARIOS = {
    "S1": dict(cluster_sizes=[25, 25, 25, 25], size_range=(250, 25810)),
    "S2": dict(cluster_sizes=[10, 40, 10, 40], size_range=(250, 25810)),
    "S3": dict(cluster_sizes=[50, 50], size_range=(250, 25810)),
    "S4": dict(cluster_sizes=[50], size_range=(250, 2500)),
    "S5": dict(cluster_sizes=[1] * 50, size_range=(250, 2500)),
}


def power_law_sizes(rng, count, lo, hi, exponent=3.0):
    u = rng.random(count)
    n = np.rint(lo * (hi / lo) ** (u ** exponent)).astype(np.int64)
    return np.clip(n, lo, hi)


def gen_softmax_federation(cluster_sizes: Sequence[int], seed=0, *,
                           size_range=(250, 25810), p=60, n_classes=10,
                           noise_sd=0.5, fractions=DEFAULT_FRACTIONS,
                           name="") -> Federation:
    """Clustered multinomial-logit federation.

    Each cluster draws a mean ``mu ~ N(0, 1)`` and weight/bias entries from
    ``N(mu, 1)``; labels are ``argmax(W x + b + noise)`` with
    ``x ~ N(0, I_p)`` and Gaussian logit noise.
    """
    ss = np.random.SeedSequence(seed)
    param_ss, size_ss, dev_ss = ss.spawn(3)
    prng = np.random.default_rng(param_ss)
    L = len(cluster_sizes)
    params = []
    for _ in range(L):
        mu = prng.normal()
        W = prng.normal(mu, 1.0, size=(n_classes, p))
        b = prng.normal(mu, 1.0, size=n_classes)
        params.append(np.concatenate([W.ravel(), b]))
    labels = np.repeat(np.arange(L), cluster_sizes)
    m = len(labels)
    sizes = power_law_sizes(np.random.default_rng(size_ss), m, *size_range)
    devices = []
    for i, child in enumerate(dev_ss.spawn(m)):
        data_ss, split_ss = child.spawn(2)
        rng = np.random.default_rng(data_ss)
        W = params[labels[i]][:n_classes * p].reshape(n_classes, p)
        b = params[labels[i]][n_classes * p:]
        X = rng.standard_normal((sizes[i], p))
        z = X @ W.T + b + rng.normal(0.0, noise_sd, size=(sizes[i], n_classes))
        y = np.argmax(z, axis=1)
        devices.append(split(DeviceData.unsplit(X, y), fractions, np.random.default_rng(split_ss)))
    return Federation(devices, ModelSpec.softmax(p, n_classes), labels, np.array(params), name)


def gen_synthetic(scenario: str, seed=0, **overrides) -> Federation:
    """Scenario S1-S5 federations (device counts and cluster layout fixed)."""
    key = scenario.upper()
    if key not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}")
    kw = dict(SCENARIOS[key])
    kw.update(overrides)
    return gen_softmax_federation(seed=seed, name=key, **kw)


# ---------------------------------------------------------------------------
# linear-regression clusters
# ---------------------------------------------------------------------------

def gen_linear_clusters(m: int, L: int, n, d: int, b: float, sigma: float, seed=0, *,
                        intercept=False, fractions=None, scale=None) -> Federation:
    """Clustered linear model ``y = <x, alpha_l> + sigma * eps``.

    Cluster centres are redrawn until every pair is at least ``b`` apart.
    Device ``i`` belongs to cluster ``i * L // m``. With ``fractions=None``
    every row is a training row.
    """
    if b <= 0:
        raise ValueError("cluster gap b must be positive")
    ss = np.random.SeedSequence(seed)
    param_ss, dev_ss = ss.spawn(2)
    prng = np.random.default_rng(param_ss)
    dim = d + (1 if intercept else 0)
    scale = b if scale is None else scale
    while True:
        alpha = prng.normal(0.0, scale, size=(L, dim))
        if L == 1:
            break
        gaps = [np.linalg.norm(alpha[i] - alpha[j]) for i in range(L) for j in range(i + 1, L)]
        if min(gaps) >= b:
            break
    labels = np.array([i * L // m for i in range(m)])
    sizes = np.broadcast_to(np.asarray(n, dtype=np.int64), (m,))
    spec = ModelSpec.linear(d, intercept=intercept)
    devices = []
    for i, child in enumerate(dev_ss.spawn(m)):
        data_ss, split_ss = child.spawn(2)
        rng = np.random.default_rng(data_ss)
        X = rng.standard_normal((sizes[i], d))
        a = alpha[labels[i]]
        y = X @ a[:d] + (a[d] if intercept else 0.0) + sigma * rng.standard_normal(sizes[i])
        dev = DeviceData.unsplit(X, y)
        if fractions is not None:
            dev = split(dev, fractions, np.random.default_rng(split_ss))
        devices.append(dev)
    return Federation(devices, spec, labels, alpha, "linear")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSource:
    path: str
    response: str
    devices: int
    features: Optional[tuple] = None


def read_numeric_csv(path, response: str, features=None):
    """Parse a header-first numeric CSV into ``(X, y, feature_names)``."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvParseError(f"{path}: empty file (no header row)") from None
        if response not in header:
            raise SchemaError(f"{path}: response column {response!r} not in header {header}")
        names = list(features) if features else [h for h in header if h != response]
        missing = [c for c in names if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing feature columns {missing}")
        cols = [header.index(c) for c in names]
        ycol = header.index(response)
        X, y = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvParseError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for c in cols + [ycol]:
                try:
                    vals.append(float(row[c]))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: line {line_no}, column {header[c]!r}: "
                        f"non-numeric value {row[c]!r}") from None
            X.append(vals[:-1])
            y.append(vals[-1])
    if not y:
        raise CsvParseError(f"{path}: no data rows")
    return np.array(X, dtype=np.float64), np.array(y, dtype=np.float64), names


def _standardize(dev: DeviceData) -> DeviceData:
    Xtr = dev.features[dev.train]
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    sd[sd == 0] = 1.0
    return DeviceData((dev.features - mu) / sd, dev.targets, dev.train, dev.val, dev.test)


def load_csv_federation(sources: Sequence[CsvSource], seed=0, *, fractions=DEFAULT_FRACTIONS,
                        pad_features_to: Optional[int] = None, standardize=True) -> Federation:
    """Deal shuffled CSV rows round-robin to each source's devices.

    Sources with fewer than ``pad_features_to`` features get extra
    standard-normal columns. Each source is one ground-truth cluster.
    """
    ss = np.random.SeedSequence(seed)
    devices, labels = [], []
    p = None
    for s_idx, (src, child) in enumerate(zip(sources, ss.spawn(len(sources)))):
        pad_ss, shuf_ss, split_ss = child.spawn(3)
        X, y, _ = read_numeric_csv(src.path, src.response, src.features)
        if pad_features_to is not None and X.shape[1] < pad_features_to:
            extra = np.random.default_rng(pad_ss).standard_normal((X.shape[0], pad_features_to - X.shape[1]))
            X = np.hstack([X, extra])
        if p is None:
            p = X.shape[1]
        elif X.shape[1] != p:
            raise SchemaError(f"{src.path}: {X.shape[1]} features, expected {p}")
        if src.devices < 1:
            raise DataError(f"{src.path}: allocation needs at least one device")
        order = np.random.default_rng(shuf_ss).permutation(len(y))
        split_seeds = split_ss.spawn(src.devices)
        for r in range(src.devices):
            rows = order[r::src.devices]
            if len(rows) == 0:
                raise DataError(f"{src.path}: too few rows for {src.devices} devices")
            dev = split(DeviceData.unsplit(X[rows], y[rows]), fractions,
                        np.random.default_rng(split_seeds[r]))
            devices.append(_standardize(dev) if standardize else dev)
            labels.append(s_idx)
    return Federation(devices, ModelSpec.linear(p), np.array(labels), None, "csv")


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def export_federation(fed: Federation, directory) -> Path:
    """Write one CSV per device plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, dev in enumerate(fed.devices):
        fname = f"device_{i:04d}.csv"
        role = np.full(dev.n, "", dtype=object)
        for name in ("train", "val", "test"):
            role[getattr(dev, name)] = name
        with open(directory / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(fed.spec.p)] + ["y", "split"])
            for r in range(dev.n):
                w.writerow([repr(float(v)) for v in dev.features[r]] + [repr(dev.targets[r].item()), role[r]])
        files.append(fname)
    manifest = {
        "name": fed.name,
        "spec": {"kind": fed.spec.kind.value, "p": fed.spec.p,
                 "n_classes": fed.spec.n_classes, "intercept": fed.spec.intercept},
        "devices": files,
        "true_labels": None if fed.true_labels is None else fed.true_labels.tolist(),
        "true_params": None if fed.true_params is None else np.asarray(fed.true_params).tolist(),
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return directory


def import_federation(directory) -> Federation:
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read federation manifest in {directory}: {exc}") from exc
    s = manifest["spec"]
    spec = ModelSpec(ModelKind(s["kind"]), s["p"], s["n_classes"], s["intercept"])
    devices = []
    for fname in manifest["devices"]:
        with open(directory / fname, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        X = np.array([[float(v) for v in r[:spec.p]] for r in rows])
        if spec.kind is ModelKind.SOFTMAX:
            y = np.array([int(r[spec.p]) for r in rows])
        else:
            y = np.array([float(r[spec.p]) for r in rows])
        role = np.array([r[spec.p + 1] for r in rows])
        devices.append(DeviceData(X, y, *(np.flatnonzero(role == k) for k in ("train", "val", "test"))))
    labels = manifest.get("true_labels")
    params = manifest.get("true_params")
    return Federation(devices, spec, None if labels is None else np.array(labels),
                      None if params is None else np.array(params), manifest.get("name", ""))


__all__ = [
    "DataError", "CsvParseError", "SchemaError", "InvalidSplitError", "DeviceData",
    "Federation", "split", "gen_synthetic", "gen_softmax_federation", "gen_linear_clusters",
    "CsvSource", "load_csv_federation", "read_numeric_csv", "export_federation",
    "import_federation", "power_law_sizes", "SCENARIOS", "DEFAULT_FRACTIONS",
]
