"""Choosing lambda (warm-started ladder or independent grid) and the two
non-clustered baselines, LOCAL and FedAvg."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
import numpy as np

from .core import DivergenceError, HyperParams
from .engine import (EngineState, FPFCEngine, Schedule, _device_arrays, _local_gd,
                     device_metrics, initial_omega, sample_active)
from .losses import pooled_metric
from .penalty import PenaltyKind


@dataclass(frozen=True)
class LambdaLadder:
    """Increasing lambda values climbed by :func:`tune_warmup`.

    A rung is left once the validation metric moves by less than
    ``advance_tol`` between two consecutive checks (``check_every`` rounds
    apart) or after ``per_lambda_round_cap`` rounds.
    """

    values: tuple
    advance_tol: float = 1e-4
    per_lambda_round_cap: int = 100
    check_every: int = 1

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("lambda ladder is empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("lambda ladder must be strictly increasing")
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("lambda values must be finite and >= 0")
        if not self.advance_tol > 0:
            raise ValueError("advance_tol must be positive")
        if self.per_lambda_round_cap < 1 or self.check_every < 1:
            raise ValueError("round cap and check interval must be >= 1")


@dataclass
class TuningResult:
    selected_lambda: float
    best_state: EngineState
    best_val: float
    history: list
    total_rounds: int
    strategy: str
    traces: list = field(default_factory=list)

    def to_report(self) -> dict:
        return {
            "strategy": self.strategy,
            "selected_lambda": self.selected_lambda,
            "best_val_metric": self.best_val,
            "total_rounds": self.total_rounds,
            "per_lambda": self.history,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_report(), indent=2, sort_keys=True)


def _better(a, b, maximize):
    if math.isnan(b):
        return not math.isnan(a)
    if math.isnan(a):
        return False
    return a > b if maximize else a < b


def _hp_at(hp, lam):
    # xi must stay below lambda; lambda = 0 ignores it
    if lam > 0 and hp.xi >= lam:
        raise ValueError(f"xi={hp.xi} must be below every positive lambda (got {lam})")
    nu = max(hp.nu, hp.xi) if lam > 0 else hp.nu
    return hp.replace(lam=lam, nu=nu)


def _timed_step(eng):
    t0 = time.perf_counter()
    active = eng.step()
    wall = (time.perf_counter() - t0) * 1e3 if eng.record_wall else 0.0
    return eng.evaluate(active, wall)


def tune_warmup(federation, hp: HyperParams, ladder: LambdaLadder, schedule: Schedule,
                seed=0, *, kind=PenaltyKind.SMOOTHED_SCAD, omega0=None,
                callback=None, record_wall=False) -> TuningResult:
    """Climb the ladder warm-starting every rung from the previous one.

    Climbing stops at the first rung whose best validation metric is worse
    than the best seen on earlier rungs. Training then resumes from the best
    retained model at its lambda until ``schedule.rounds`` total rounds
    have been spent. The returned state is the best validation model seen
    anywhere along the way.
    """
    maximize = federation.spec.maximize
    eng = FPFCEngine(federation, _hp_at(hp, ladder.values[0]), schedule, kind=kind,
                     seed=seed, omega0=omega0, record_wall=record_wall)
    best_val, best_lam, best_state = math.nan, ladder.values[0], eng.state.copy()
    history, traces = [], []
    total = 0

    def observe(trace):
        nonlocal best_val, best_lam, best_state
        traces.append(trace)
        if callback is not None:
            callback(eng, trace)
        if _better(trace.val_metric, best_val, maximize):
            best_val, best_lam, best_state = trace.val_metric, eng.hp.lam, eng.state.copy()

    try:
        for lam in ladder.values:
            eng.set_lambda(lam)
            eng.hp = _hp_at(eng.hp, lam)
            prior_best = best_val
            rung_best, prev, used = math.nan, None, 0
            while used < ladder.per_lambda_round_cap:
                tr = _timed_step(eng)
                used += 1
                observe(tr)
                if _better(tr.val_metric, rung_best, maximize):
                    rung_best = tr.val_metric
                if used % ladder.check_every == 0:
                    if prev is not None and abs(tr.val_metric - prev) < ladder.advance_tol:
                        break
                    prev = tr.val_metric
            total += used
            history.append({"lambda": lam, "rounds": used, "best_val_metric": rung_best})
            if _better(prior_best, rung_best, maximize):
                break

        remaining = schedule.rounds - total
        if remaining > 0:
            eng.state = best_state.copy()
            eng.state.round = total  # keep round numbers (and sampling streams) moving forward
            eng.hp = _hp_at(eng.hp, best_lam)
            for _ in range(remaining):
                observe(_timed_step(eng))
            total += remaining
            history.append({"lambda": best_lam, "rounds": remaining, "best_val_metric": best_val,
                            "phase": "final"})
    finally:
        eng.close()
    return TuningResult(best_lam, best_state, best_val, history, total, "warmup", traces)


def tune_separate(federation, hp: HyperParams, ladder: LambdaLadder, schedule: Schedule,
                  seed=0, *, kind=PenaltyKind.SMOOTHED_SCAD, omega0=None,
                  callback=None, record_wall=False) -> TuningResult:
    """Train every lambda from the same fresh start for the per-lambda cap
    and keep the one whose final model validates best."""
    maximize = federation.spec.maximize
    best = None
    history, traces = [], []
    total = 0
    for lam in ladder.values:
        sched = Schedule(ladder.per_lambda_round_cap, schedule.participation, 1,
                         schedule.batch_size)
        eng = FPFCEngine(federation, _hp_at(hp, lam), sched, kind=kind, seed=seed, omega0=omega0,
                          record_wall=record_wall)
        try:
            tr = eng.run(sched.rounds, callback)
        finally:
            eng.close()
        traces.extend(tr)
        total += sched.rounds
        val = tr[-1].val_metric
        history.append({"lambda": lam, "rounds": sched.rounds, "best_val_metric": val})
        if best is None or _better(val, best[0], maximize):
            best = (val, lam, eng.state)
    return TuningResult(best[1], best[2], best[0], history, total, "grid", traces)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineResult:
    """Per-device models (``omega`` has one row per device) and their metrics."""

    omega: np.ndarray
    train_loss: np.ndarray
    val_metric: np.ndarray
    test_metric: np.ndarray
    spec: object
    val_counts: np.ndarray
    test_counts: np.ndarray
    traces: list = field(default_factory=list)

    @property
    def test(self) -> float:
        """Test metric pooled over every device's held-out rows."""
        return pooled_metric(self.spec, self.test_metric, self.test_counts)

    @property
    def val(self) -> float:
        return pooled_metric(self.spec, self.val_metric, self.val_counts)


def _result(spec, arrays, omega, traces=()):
    f, val, test = device_metrics(spec, arrays, omega)
    return BaselineResult(omega, f, val, test, spec, [len(y) for y in arrays.yval],
                          [len(y) for y in arrays.yte], list(traces))


def run_local_baseline(federation, epochs: int, alpha: float, seed=0, omega0=None) -> BaselineResult:
    """Independent full-batch GD on every device's training split."""
    spec = federation.spec
    arrays = _device_arrays(federation)
    w0 = initial_omega(spec.d, seed) if omega0 is None else np.asarray(omega0, dtype=np.float64)
    omega = np.empty((federation.m, spec.d))
    for i in range(federation.m):
        omega[i] = _local_gd(spec, w0, w0, arrays.Xtr[i], arrays.ytr[i], alpha, 0.0, epochs)
        if not np.all(np.isfinite(omega[i])):
            raise DivergenceError("local training diverged", i, None)
    return _result(spec, arrays, omega)


def weighted_average(models, weights) -> np.ndarray:
    models = np.asarray(models, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return (w[:, None] * models).sum(axis=0) / w.sum()


def run_fedavg(federation, rounds: int, local_epochs: int, alpha: float, tau: float = 1.0,
               seed=0, *, participation="uniform", omega0=None, eval_every=1) -> BaselineResult:
    """FedAvg with full-batch local GD and ``n_i``-weighted aggregation.

    The returned ``omega`` repeats the final global model on every row; the
    traces are ``(round, mean train loss, mean test metric)`` tuples.
    """
    spec = federation.spec
    arrays = _device_arrays(federation)
    m = federation.m
    g = initial_omega(spec.d, seed) if omega0 is None else np.asarray(omega0, dtype=np.float64)
    n = arrays.n_train.astype(np.float64)
    traces = []
    for k in range(rounds):
        active = sample_active(m, participation, tau, k, seed)
        local = np.empty((len(active), spec.d))
        for r, i in enumerate(active):
            local[r] = _local_gd(spec, g, g, arrays.Xtr[i], arrays.ytr[i], alpha, 0.0, local_epochs)
            if not np.all(np.isfinite(local[r])):
                raise DivergenceError("local training diverged", int(i), k)
        g = weighted_average(local, n[active])
        if (k + 1) % eval_every == 0 or k == rounds - 1:
            res = _result(spec, arrays, np.tile(g, (m, 1)))
            traces.append((k + 1, float(res.train_loss.mean()), res.test))
    omega = np.tile(g, (m, 1))
    return _result(spec, arrays, omega, traces)


__all__ = [
    "LambdaLadder", "TuningResult", "tune_warmup", "tune_separate", "BaselineResult",
    "run_local_baseline", "run_fedavg", "weighted_average",
]
