"""Synchronous and asynchronous fusion-penalized federated clustering.

The server keeps, for every device pair ``i < j``, an auxiliary difference
``theta_ij`` and a dual ``v_ij``; devices only ever receive their aggregate
``zeta_i = mean_j(omega_j + theta_ij - v_ij / rho)``.
"""
from __future__ import annotations

import heapq
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import _kernels
from .clustering import adjusted_rand_index, labels_from_theta
from .core import (DivergenceError, HyperParams, InvalidHyperparameterError,
                   PairwiseState, ProtocolError, RoundTrace, n_pairs,
                   pair_arrays, rows_touching)
from .losses import (ModelKind, design_matrix, loss_grad_arrays, metric_arrays,
                     pooled_metric)
from .penalty import (PenaltyKind, exact_penalty_value, penalty_value,
                      shrink_group_l1, shrink_scad)

# substream tags
_INIT, _SAMPLE, _LOCAL, _DELAY = 1, 2, 3, 4


def _stream(seed, tag, *ids):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, ids)]))


# ---------------------------------------------------------------------------
# state and schedules
# ---------------------------------------------------------------------------

@dataclass
class EngineState:
    omega: np.ndarray
    pairwise: PairwiseState
    zeta: np.ndarray
    round: int = 0
    rng_seed: int = 0
    sim_time: float = 0.0

    @property
    def m(self) -> int:
        return self.omega.shape[0]

    @property
    def d(self) -> int:
        return self.omega.shape[1]

    def copy(self) -> "EngineState":
        return EngineState(self.omega.copy(), self.pairwise.copy(), self.zeta.copy(),
                           self.round, self.rng_seed, self.sim_time)

    def recomputed_zeta(self) -> np.ndarray:
        I, J = pair_arrays(self.m)
        pw = self.pairwise
        return _kernels.backend.zeta_all(self.omega, pw.theta, pw.dual, I, J, pw.rho)


def initial_omega(d: int, seed=0, scale=0.01) -> np.ndarray:
    """Shared starting vector ``scale * N(0, I)`` from the init substream."""
    return scale * _stream(seed, _INIT).standard_normal(d)


def init_state(omega0, m: int, rho: float, seed=0) -> EngineState:
    omega0 = np.asarray(omega0, dtype=np.float64)
    if omega0.ndim == 2:
        if omega0.shape[0] != m or not np.all(omega0 == omega0[0]):
            raise ProtocolError("all devices must start from the same parameter vector")
        omega0 = omega0[0]
    omega = np.tile(omega0, (m, 1))
    return EngineState(omega, PairwiseState.zeros(m, omega.shape[1], rho), omega.copy(), 0, int(seed))


@dataclass(frozen=True)
class Schedule:
    """Round budget and participation; local epochs live on ``HyperParams``.

    ``participation`` is ``"uniform"`` (``ceil(tau * m)`` devices per round)
    or ``"full"``. ``eval_every`` thins the emitted traces; the last round is
    always traced. ``batch_size=None`` means full-batch local GD.
    """

    rounds: int
    participation: str = "uniform"
    eval_every: int = 1
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.participation not in ("uniform", "full"):
            raise ValueError(f"unknown participation rule {self.participation!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass(frozen=True)
class DelayModel:
    """Per-job delay ``U[0, max_delay]``, multiplied by ``slow_factor`` on stragglers."""

    max_delay: float = 20.0
    slow_devices: tuple = ()
    slow_factor: float = 10.0

    def delay(self, device: int, job: int, seed) -> float:
        u = _stream(seed, _DELAY, device, job).random()
        scale = self.slow_factor if device in self.slow_devices else 1.0
        return float(u * self.max_delay * scale)


def sample_active(m: int, participation: str, tau: float, k: int, seed) -> np.ndarray:
    """Devices taking part in round ``k`` (sorted)."""
    if participation == "full":
        return np.arange(m)
    size = max(1, math.ceil(tau * m - 1e-9))
    rng = _stream(seed, _SAMPLE, k)
    return np.sort(rng.choice(m, size=size, replace=False))


# ---------------------------------------------------------------------------
# local update and inexactness
# ---------------------------------------------------------------------------

@np.errstate(over="ignore", invalid="ignore")  # divergence is checked by the callers
def _local_gd(spec, omega, zeta, X, y, alpha, rho, T, batch_size=None, rng=None):
    w = np.array(omega, dtype=np.float64)
    n = X.shape[0]
    if batch_size is None or batch_size >= n:
        for _ in range(T):
            g = loss_grad_arrays(spec, w, X, y)[1]
            w -= alpha * (g + rho * (w - zeta))
        return w
    for _ in range(T):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            b = order[s:s + batch_size]
            g = loss_grad_arrays(spec, w, X[b], y[b])[1]
            w -= alpha * (g + rho * (w - zeta))
    return w


def local_update(omega_i, zeta_i, data, spec, alpha, rho, T, *, batch_size=None,
                 rng=None, device=None, round=None) -> np.ndarray:
    """``T`` steps of ``w <- w - alpha * (grad f_i(w) + rho * (w - zeta_i))``."""
    if alpha <= 0 or T < 1:
        raise InvalidHyperparameterError("local update needs alpha > 0 and T >= 1")
    X, y = data.features[data.train], data.targets[data.train]
    if batch_size is not None and rng is None:
        rng = np.random.default_rng(0)
    w = _local_gd(spec, omega_i, np.asarray(zeta_i, dtype=np.float64), X, y,
                  alpha, rho, T, batch_size, rng)
    if not np.all(np.isfinite(w)):
        raise DivergenceError("local iterate became non-finite", device, round)
    return w


def contraction_constant(alpha, rho, L_f, L_minus=0.0, constant="augmented") -> float:
    """Squared-distance contraction factor of one local GD step.

    ``constant="augmented"`` uses ``1 - 2 alpha mu (L_f + rho) / (L_f + rho + mu)``;
    ``"loss_only"`` uses ``L_f`` in place of ``L_f + rho`` in the numerator.
    """
    if constant not in ("augmented", "loss_only"):
        raise ValueError(f"unknown constant {constant!r}")
    mu = rho - L_minus
    if mu <= 0:
        raise InvalidHyperparameterError("need rho > L_minus")
    if not 0 < alpha <= (1.0 + 1e-12) / (L_f + rho + mu):
        raise InvalidHyperparameterError("need 0 < alpha <= 1/(L_f + rho + mu)")
    top = L_f + rho if constant == "augmented" else L_f
    c = 1.0 - alpha * 2.0 * mu * top / (L_f + rho + mu)
    if not 0 < c < 1:
        raise InvalidHyperparameterError(f"contraction constant c={c} not in (0, 1)")
    return c


def inexactness_epochs(epsilon, alpha, rho, L_f, L_minus=0.0, constant="augmented") -> int:
    """Epochs after which the local iterate is an ``epsilon``-inexact solution."""
    c = contraction_constant(alpha, rho, L_f, L_minus, constant)
    return epochs_for_epsilon(epsilon, c)


def epochs_for_epsilon(epsilon, c) -> int:
    if not 0 < c < 1:
        raise InvalidHyperparameterError(f"contraction constant c={c} not in (0, 1)")
    if epsilon <= 0:
        raise InvalidHyperparameterError("epsilon must be positive")
    T = 2.0 * math.log(epsilon / (1.0 + epsilon)) / math.log(c)
    # guard against ceil(20.000000000001) style round-off
    return max(1, math.ceil(T - 1e-9))


def epsilon_from_epochs(T, c) -> float:
    return 1.0 / (c ** (-T / 2.0) - 1.0)


def feasible_hyperparams(L_f, L_minus, lam, xi, a, epsilon=0.5, margin=0.01) -> dict:
    """A ``(rho, alpha, T)`` choice meeting the descent conditions.

    ``rho = max(3 L_f, 2 lam / xi, 2/(a-1), L_minus) + margin`` and
    ``alpha = 1/(L_f + 2 rho - L_minus)``; ``T`` makes each local solve
    ``epsilon``-inexact (``epsilon = 0.5`` gives ``1 - 2 c^{T/2} >= 1/3``).
    """
    rho = max(3.0 * L_f, 2.0 * lam / xi if lam > 0 else 0.0, 2.0 / (a - 1.0), L_minus) + margin
    alpha = 1.0 / (L_f + 2.0 * rho - L_minus)
    c = contraction_constant(alpha, rho, L_f, L_minus)
    T = epochs_for_epsilon(epsilon, c)
    return {"rho": rho, "alpha": alpha, "T": T, "c": c}


def descent_conditions(hp: HyperParams, L_f, L_minus=0.0, T=None) -> dict:
    """Evaluate each hyperparameter condition of the convergence theorem."""
    c = contraction_constant(hp.alpha, hp.rho, L_f, L_minus)
    if T is None:
        T = hp.local_epochs.epochs(0, 0)
    cT = c ** (T / 2.0)
    bound = L_f / (1 - 2 * cT) if 1 - 2 * cT > 0 else math.inf
    return {
        "T": T > -2 * math.log(2) / math.log(c),
        "alpha": 0 < hp.alpha <= 1.0 / (L_f + 2 * hp.rho - L_minus),
        "rho_Lf": hp.rho > bound,
        "rho_lam_xi": hp.lam == 0 or hp.rho > 2 * hp.lam / hp.xi,
        "rho_a": hp.rho > 2.0 / (hp.a - 1),
        "rho_Lminus": hp.rho > L_minus,
    }


def exact_local_minimizer(spec, data, zeta_i, rho) -> np.ndarray:
    """Closed-form ``argmin f_i(w) + rho/2 ||w - zeta_i||^2`` for squared loss."""
    if spec.kind is not ModelKind.LINEAR:
        raise ValueError("closed form only for linear regression")
    A = design_matrix(spec, data.features[data.train])
    y = data.targets[data.train]
    n = A.shape[0]
    H = (2.0 / n) * (A.T @ A) + rho * np.eye(spec.d)
    return np.linalg.solve(H, (2.0 / n) * (A.T @ y) + rho * np.asarray(zeta_i))


# ---------------------------------------------------------------------------
# server update
# ---------------------------------------------------------------------------

def _active_rows(m, active):
    I, J = pair_arrays(m)
    mask = np.zeros(m, dtype=bool)
    mask[np.asarray(active, dtype=np.int64)] = True
    return np.flatnonzero(mask[I] | mask[J]).astype(np.int64)


def _xi_for(hp):
    return hp.xi if hp.lam > 0 else 0.0


def server_update(state: EngineState, active, new_omegas: Mapping, hp: HyperParams,
                  kind=PenaltyKind.SMOOTHED_SCAD) -> EngineState:
    """Return the post-round state; ``state`` itself is left untouched.

    Pairs with at least one active endpoint get a proximal ``theta`` step and
    a dual ascent step; ``zeta`` is then recomputed for every device.
    """
    kind = PenaltyKind(kind)
    omega = state.omega.copy()
    for i in active:
        try:
            omega[i] = new_omegas[i]
        except (KeyError, IndexError):
            raise ProtocolError(f"no uploaded parameters for active device {i}") from None
    pw = state.pairwise.copy()
    _server_inplace(omega, pw, active, hp, kind)
    I, J = pair_arrays(state.m)
    zeta = _kernels.backend.zeta_all(omega, pw.theta, pw.dual, I, J, pw.rho)
    return EngineState(omega, pw, zeta, state.round + 1, state.rng_seed, state.sim_time)


def _server_inplace(omega, pw, active, hp, kind, rows=None):
    if kind == PenaltyKind.SMOOTHED_SCAD and hp.lam > 0 and (hp.a - 1.0) * pw.rho <= 1.0:
        raise InvalidHyperparameterError("(a - 1) * rho must exceed 1")
    if rows is None:
        rows = _active_rows(pw.m, active)
    I, J = pair_arrays(pw.m)
    _kernels.backend.server_update_rows(omega, pw.theta, pw.dual, I, J, rows,
                                        hp.lam, hp.a, _xi_for(hp), pw.rho, kind)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _train_losses(federation, omega, subset="train"):
    spec = federation.spec
    out = np.empty(federation.m)
    for i, dev in enumerate(federation.devices):
        idx = getattr(dev, subset)
        out[i] = loss_grad_arrays(spec, omega[i], dev.features[idx], dev.targets[idx], False)[0]
    return out


def objective(omega, federation, hp: HyperParams, kind=PenaltyKind.SMOOTHED_SCAD) -> float:
    """Sum of device losses plus ``(1/2m) sum_{i,j} g(||omega_i - omega_j||)``."""
    omega = np.asarray(getattr(omega, "per_device", omega), dtype=np.float64)
    m = omega.shape[0]
    f = float(_train_losses(federation, omega).sum())
    if m < 2 or hp.lam == 0:
        return f
    I, J = pair_arrays(m)
    dist = _kernels.backend.row_norms(omega[I] - omega[J])
    return f + float(np.sum(exact_penalty_value(dist, hp, kind))) / m


def aug_lagrangian(state: EngineState, federation, hp: HyperParams,
                   kind=PenaltyKind.SMOOTHED_SCAD, f_sum=None) -> float:
    """Augmented Lagrangian over all ordered pairs, diagonal included."""
    m = state.m
    if f_sum is None:
        f_sum = float(_train_losses(federation, state.omega).sum())
    pw = state.pairwise
    g0 = float(penalty_value(0.0, hp, kind))
    total = m * g0
    if m > 1:
        I, J = pair_arrays(m)
        tn, inner, rsq = _kernels.backend.pair_terms(state.omega, pw.theta, pw.dual, I, J)
        total += 2.0 * float(np.sum(penalty_value(tn, hp, kind) + inner + 0.5 * pw.rho * rsq))
    return f_sum + total / (2.0 * m)


def stationarity_residuals(state: EngineState, federation, hp: HyperParams,
                           kind=PenaltyKind.SMOOTHED_SCAD) -> tuple:
    """``(||grad_omega L0||^2, ||G||^2, feasibility^2)`` over ordered pairs.

    ``G_ij = theta_ij - prox_g(theta_ij + v_ij)`` with the unsmoothed penalty
    and unit step.
    """
    kind = PenaltyKind(kind)
    spec = federation.spec
    m = state.m
    pw = state.pairwise
    I, J = pair_arrays(m)
    vsum = np.zeros_like(state.omega)
    if m > 1:
        np.add.at(vsum, I, pw.dual)
        np.add.at(vsum, J, -pw.dual)
    gn = 0.0
    for i, dev in enumerate(federation.devices):
        g = loss_grad_arrays(spec, state.omega[i], dev.features[dev.train], dev.targets[dev.train])[1]
        r = g + vsum[i] / m
        gn += float(r @ r)
    if m < 2:
        return gn, 0.0, 0.0
    z = pw.theta + pw.dual
    zn = _kernels.backend.row_norms(z)
    if kind == PenaltyKind.GROUP_L1:
        c = np.array([shrink_group_l1(x, hp.lam, 1.0) for x in zn])
    else:
        if hp.lam > 0 and hp.a <= 2.0:
            raise InvalidHyperparameterError("unit-step SCAD prox needs a > 2")
        c = np.array([shrink_scad(x, hp.lam, hp.a, 1.0) for x in zn])
    G = pw.theta - c[:, None] * z
    _, _, rsq = _kernels.backend.pair_terms(state.omega, pw.theta, pw.dual, I, J)
    return gn, 2.0 * float(np.sum(G * G)), 2.0 * float(np.sum(rsq))


def pairwise_distance_matrix(omega) -> np.ndarray:
    omega = np.ascontiguousarray(getattr(omega, "per_device", omega), dtype=np.float64)
    return _kernels.backend.pairwise_distances(omega)


# ---------------------------------------------------------------------------
# the synchronous engine
# ---------------------------------------------------------------------------

@dataclass
class _Arrays:
    Xtr: list
    ytr: list
    Xval: list
    yval: list
    Xte: list
    yte: list
    n_train: np.ndarray


def _device_arrays(federation) -> _Arrays:
    cols = {k: [] for k in ("Xtr", "ytr", "Xval", "yval", "Xte", "yte")}
    for dev in federation.devices:
        for name, (xk, yk) in {"train": ("Xtr", "ytr"), "val": ("Xval", "yval"),
                               "test": ("Xte", "yte")}.items():
            idx = getattr(dev, name)
            cols[xk].append(np.ascontiguousarray(dev.features[idx]))
            cols[yk].append(dev.targets[idx])
    return _Arrays(**cols, n_train=np.array([len(d.train) for d in federation.devices]))


class FPFCEngine:
    """Owns an :class:`EngineState` and advances it round by round.

    ``workers > 1`` runs the local updates of a round in a thread pool; every
    device draws from its own ``(seed, round, device)`` substream so results
    do not depend on scheduling.
    """

    def __init__(self, federation, hp: HyperParams, schedule: Schedule = None, *,
                 kind=PenaltyKind.SMOOTHED_SCAD, seed=0, omega0=None,
                 state: EngineState = None, delay: DelayModel = None,
                 workers: int = 1, record_wall: bool = False, evaluate_lagrangian=True):
        self.federation = federation
        self.spec = federation.spec
        self.hp = hp
        self.schedule = schedule or Schedule(rounds=0)
        self.kind = PenaltyKind(kind)
        self.seed = int(seed)
        self.delay = delay
        self.workers = workers
        self.record_wall = record_wall
        self.evaluate_lagrangian = evaluate_lagrangian
        m = federation.m
        if state is None:
            if omega0 is None:
                omega0 = initial_omega(self.spec.d, seed)
            state = init_state(omega0, m, hp.rho, seed)
        elif state.pairwise.rho != hp.rho:
            raise InvalidHyperparameterError("state was built with a different rho")
        self.state = state
        self.arrays = _device_arrays(federation)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None
        self._I, self._J = pair_arrays(m)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def set_lambda(self, lam: float):
        self.hp = self.hp.replace(lam=lam)

    # -- one round -------------------------------------------------------
    def _local(self, i, k):
        st, hp, a = self.state, self.hp, self.arrays
        T = hp.local_epochs.epochs(i, k)
        rng = _stream(self.seed, _LOCAL, k, i) if self.schedule.batch_size else None
        w = _local_gd(self.spec, st.omega[i], st.zeta[i], a.Xtr[i], a.ytr[i],
                      hp.alpha, hp.rho, T, self.schedule.batch_size, rng)
        if not np.all(np.isfinite(w)):
            raise DivergenceError("local iterate became non-finite", i, k)
        return w

    def step(self) -> np.ndarray:
        """Run one synchronous round; returns the active set."""
        st = self.state
        k = st.round
        m = st.m
        active = sample_active(m, self.schedule.participation, self.hp.tau, k, self.seed)
        if self._pool is not None:
            new = list(self._pool.map(lambda i: self._local(i, k), active))
        else:
            new = [self._local(i, k) for i in active]
        for i, w in zip(active, new):
            st.omega[i] = w
        if m > 1:
            rows = _active_rows(m, active)
            _server_inplace(st.omega, st.pairwise, active, self.hp, self.kind, rows)
            st.zeta = _kernels.backend.zeta_all(st.omega, st.pairwise.theta, st.pairwise.dual,
                                                self._I, self._J, st.pairwise.rho)
        else:
            st.zeta = st.omega.copy()
        if not (np.all(np.isfinite(st.pairwise.theta)) and np.all(np.isfinite(st.pairwise.dual))):
            raise DivergenceError("server state became non-finite", None, k)
        if self.delay is not None:
            st.sim_time += max(self.delay.delay(int(i), k, self.seed) for i in active)
        st.round = k + 1
        return active

    # -- evaluation ------------------------------------------------------
    def evaluate(self, active=(), wall_ms=0.0) -> RoundTrace:
        return evaluate_state(self.state, self.federation, self.hp, self.kind, self.arrays,
                              active, wall_ms, self.evaluate_lagrangian)

    def run(self, rounds: int, callback: Optional[Callable] = None) -> list:
        traces = []
        every = self.schedule.eval_every
        for r in range(rounds):
            t0 = time.perf_counter()
            active = self.step()
            wall = (time.perf_counter() - t0) * 1e3 if self.record_wall else 0.0
            if (self.state.round % every == 0) or r == rounds - 1:
                trace = self.evaluate(tuple(int(i) for i in active), wall)
                traces.append(trace)
                if callback is not None:
                    callback(self, trace)
        return traces


def device_metrics(spec, arrays, omega) -> tuple:
    """Per-device train loss, validation metric and test metric (NaN when a
    split is empty)."""
    a = arrays
    m = omega.shape[0]
    f, val, test = np.empty(m), np.full(m, np.nan), np.full(m, np.nan)
    for i in range(m):
        f[i] = loss_grad_arrays(spec, omega[i], a.Xtr[i], a.ytr[i], False)[0]
        if len(a.yval[i]):
            val[i] = metric_arrays(spec, omega[i], a.Xval[i], a.yval[i])
        if len(a.yte[i]):
            test[i] = metric_arrays(spec, omega[i], a.Xte[i], a.yte[i])
    return f, val, test


def evaluate_state(state, federation, hp, kind, arrays=None, active=(), wall_ms=0.0,
                   with_lagrangian=True) -> RoundTrace:
    spec = federation.spec
    a = arrays or _device_arrays(federation)
    m = state.m
    f, val, test = device_metrics(spec, a, state.omega)
    lag = aug_lagrangian(state, federation, hp, kind, float(f.sum())) if with_lagrangian else math.nan
    labels = labels_from_theta(state.pairwise.theta, m, hp.nu)
    n_cl = int(labels.max()) + 1 if m else 0
    ari = math.nan
    if federation.true_labels is not None and m >= 2:
        ari = adjusted_rand_index(labels, federation.true_labels)
    return RoundTrace(
        round=state.round, active_set=tuple(int(i) for i in active), lambda_current=float(hp.lam),
        train_loss=float(f.mean()),
        val_metric=pooled_metric(spec, val, [len(y) for y in a.yval]),
        test_metric=pooled_metric(spec, test, [len(y) for y in a.yte]),
        aug_lagrangian=float(lag), num_clusters=n_cl, ari=float(ari),
        sim_time_s=float(state.sim_time), wall_ms=float(wall_ms))


def run_fpfc(omega0, federation, hp: HyperParams, schedule: Schedule,
             kind=PenaltyKind.SMOOTHED_SCAD, seed=0, *, delay: DelayModel = None,
             state: EngineState = None, callback=None, workers=1,
             record_wall=False) -> tuple:
    """Run ``schedule.rounds`` synchronous rounds.

    ``omega0`` is the shared start vector (``None`` draws one from the seed);
    pass ``state`` instead to continue an earlier run.
    """
    eng = FPFCEngine(federation, hp, schedule, kind=kind, seed=seed, omega0=omega0,
                     state=state, delay=delay, workers=workers, record_wall=record_wall)
    try:
        traces = eng.run(schedule.rounds, callback)
    finally:
        eng.close()
    return eng.state, traces


# ---------------------------------------------------------------------------
# asynchronous engine
# ---------------------------------------------------------------------------

@dataclass(order=True)
class AsyncEvent:
    completion_time: float
    job: int
    device: int


def run_async_fpfc(omega0, federation, hp: HyperParams, rounds: int, delay: DelayModel,
                   seed=0, *, kind=PenaltyKind.SMOOTHED_SCAD, eval_every=1,
                   batch_size=None, callback=None, record_wall=False) -> tuple:
    """Discrete-event simulation in which one device reports per round.

    All devices start a job at time zero. When device ``i`` finishes, the
    server refreshes every pair containing ``i`` and ``zeta_i`` only, and the
    device immediately starts its next job. Ties on completion time go to the
    lower device id.
    """
    kind = PenaltyKind(kind)
    spec = federation.spec
    m = federation.m
    if omega0 is None:
        omega0 = initial_omega(spec.d, seed)
    st = init_state(omega0, m, hp.rho, seed)
    arrays = _device_arrays(federation)
    touching = rows_touching(m)
    I, _ = pair_arrays(m)
    queue = [AsyncEvent(delay.delay(i, 0, seed), 0, i) for i in range(m)]
    heapq.heapify(queue)
    traces = []
    for k in range(rounds):
        t0 = time.perf_counter()
        ev = heapq.heappop(queue)
        i = ev.device
        st.sim_time = ev.completion_time
        T = hp.local_epochs.epochs(i, ev.job)
        rng = _stream(seed, _LOCAL, ev.job, i) if batch_size else None
        w = _local_gd(spec, st.omega[i], st.zeta[i], arrays.Xtr[i], arrays.ytr[i],
                      hp.alpha, hp.rho, T, batch_size, rng)
        if not np.all(np.isfinite(w)):
            raise DivergenceError("local iterate became non-finite", i, k)
        st.omega[i] = w
        pw = st.pairwise
        if m > 1:
            _server_inplace(st.omega, pw, (i,), hp, kind, touching[i])
            st.zeta[i] = _kernels.backend.zeta_one(i, st.omega, pw.theta, pw.dual, I,
                                                   touching[i], pw.rho)
        else:
            st.zeta[i] = st.omega[i]
        st.round = k + 1
        heapq.heappush(queue, AsyncEvent(ev.completion_time + delay.delay(i, ev.job + 1, seed),
                                         ev.job + 1, i))
        wall = (time.perf_counter() - t0) * 1e3 if record_wall else 0.0
        if st.round % eval_every == 0 or k == rounds - 1:
            trace = evaluate_state(st, federation, hp, kind, arrays, (i,), wall)
            traces.append(trace)
            if callback is not None:
                callback(st, trace)
    return st, traces


__all__ = [
    "EngineState", "Schedule", "DelayModel", "AsyncEvent", "FPFCEngine",
    "initial_omega", "init_state", "sample_active", "local_update",
    "contraction_constant", "inexactness_epochs", "epochs_for_epsilon",
    "epsilon_from_epochs", "feasible_hyperparams", "descent_conditions",
    "exact_local_minimizer", "server_update", "objective", "aug_lagrangian",
    "stationarity_residuals", "pairwise_distance_matrix", "device_metrics",
    "evaluate_state",
    "run_fpfc", "run_async_fpfc", "n_pairs",
]
