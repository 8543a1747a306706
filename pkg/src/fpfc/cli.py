"""Command-line experiment runner.

Usage::

    fpfc-run --config configs/s1.toml [--seed N] [--out-dir DIR]
             [--algorithm NAME] [--tuning {fixed,warmup,grid}] [--quiet]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .clustering import ClusterAssignment, adjusted_rand_index, extract_clusters
from .core import (DivergenceError, HyperParams, InvalidHyperparameterError, RoundTrace)
from .data import (CsvSource, DataError, DEFAULT_FRACTIONS, gen_linear_clusters,
                   gen_synthetic, load_csv_federation)
from .engine import (DelayModel, FPFCEngine, Schedule, evaluate_state, initial_omega,
                     pairwise_distance_matrix, run_async_fpfc)
from .losses import ModelSpec
from .penalty import PenaltyKind
from .tuning import LambdaLadder, run_fedavg, run_local_baseline, tune_separate, tune_warmup

log = logging.getLogger("fpfc")

ROUND_COLUMNS = ("round", "lambda", "active_count", "train_loss", "val_metric", "test_metric",
                 "aug_lagrangian", "num_clusters", "ari", "sim_time_s", "wall_ms")
ALGORITHMS = ("fpfc", "fpfc-l1", "async-fpfc", "fedavg", "local")
TUNING = ("fixed", "warmup", "grid")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset: dict
    algorithm: str
    tuning: str
    hp: HyperParams
    schedule: Schedule
    ladder: LambdaLadder | None
    delay: DelayModel | None
    seeds: list
    out_dir: Path
    distance_rounds: tuple = (0, 5, 50)
    wall_clock: bool = False
    model: dict = field(default_factory=dict)
    local_epochs_baseline: int | None = None


def _get(block, key, path, kind, default=...):
    if key not in block:
        if default is ...:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    value = block[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}, "
                                           f"got {type(value).__name__}")
    return value


def _table(raw, key, required=False):
    value = raw.get(key, {} if not required else None)
    if value is None:
        raise ConfigError(key, "missing required block")
    if not isinstance(value, dict):
        raise ConfigError(key, "expected a table")
    return value


_HP_FIELDS = {"lambda": "lam", "a": "a", "xi": "xi", "rho": "rho", "alpha": "alpha",
              "tau": "tau", "nu": "nu"}


def parse_config(raw: dict, base_dir=Path("."), *, seed=None, out_dir=None, algorithm=None,
                 tuning=None) -> ExperimentConfig:
    """Validate a decoded config mapping; errors carry the offending field path."""
    known = {"dataset", "model", "algorithm", "hyperparams", "schedule", "delay", "output",
             "seeds", "baseline"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown block")

    dataset = dict(_table(raw, "dataset", required=True))
    kinds = [k for k in ("scenario", "csv", "linear_clusters") if k in dataset]
    if len(kinds) != 1:
        raise ConfigError("dataset", "set exactly one of scenario, csv, linear_clusters")
    if "scenario" in dataset:
        sc = _get(dataset, "scenario", "dataset", str)
        if sc.upper() not in ("S1", "S2", "S3", "S4", "S5"):
            raise ConfigError("dataset.scenario", f"unknown scenario {sc!r}")
    if "csv" in dataset:
        if not isinstance(dataset["csv"], list) or not dataset["csv"]:
            raise ConfigError("dataset.csv", "expected a non-empty array of tables")
        for n, src in enumerate(dataset["csv"]):
            p = f"dataset.csv[{n}]"
            _get(src, "path", p, str)
            _get(src, "response", p, str)
            if _get(src, "devices", p, int) < 1:
                raise ConfigError(f"{p}.devices", "must be >= 1")
    fr = dataset.get("split", list(DEFAULT_FRACTIONS))
    if (not isinstance(fr, list) or len(fr) != 3 or
            not all(isinstance(x, (int, float)) and x > 0 for x in fr) or sum(fr) > 1 + 1e-12):
        raise ConfigError("dataset.split", "expected three positive fractions summing to <= 1")
    dataset["base_dir"] = Path(base_dir)

    alg_block = _table(raw, "algorithm")
    alg = algorithm or _get(alg_block, "name", "algorithm", str, "fpfc")
    if alg not in ALGORITHMS:
        raise ConfigError("algorithm.name", f"unknown algorithm {alg!r}; choose from {ALGORITHMS}")
    tune = tuning or _get(alg_block, "tuning", "algorithm", str, "fixed")
    if tune not in TUNING:
        raise ConfigError("algorithm.tuning", f"unknown tuning mode {tune!r}")

    hpb = _table(raw, "hyperparams")
    kw = {}
    for key, attr in _HP_FIELDS.items():
        if key in hpb:
            kw[attr] = _get(hpb, key, "hyperparams", float)
    if "local_epochs" in hpb:
        kw["local_epochs"] = hpb["local_epochs"]
    ladder = None
    if "ladder" in hpb:
        vals = hpb["ladder"]
        if not isinstance(vals, list) or not vals:
            raise ConfigError("hyperparams.ladder", "expected a non-empty array")
        try:
            ladder = LambdaLadder(tuple(vals),
                                  _get(hpb, "advance_tol", "hyperparams", float, 1e-4),
                                  _get(hpb, "per_lambda_round_cap", "hyperparams", int, 100),
                                  _get(hpb, "check_every", "hyperparams", int, 1))
        except ValueError as exc:
            raise ConfigError("hyperparams.ladder", str(exc)) from None
        if "lam" not in kw:
            kw["lam"] = ladder.values[0]
    try:
        hp = HyperParams(**kw)
        if ladder is not None:
            for lam in ladder.values:
                hp.replace(lam=lam)
    except InvalidHyperparameterError as exc:
        name = {v: k for k, v in _HP_FIELDS.items()}.get(exc.field, exc.field or "")
        raise ConfigError(f"hyperparams.{name}".rstrip("."), str(exc)) from None
    if tune != "fixed" and ladder is None:
        raise ConfigError("hyperparams.ladder", f"tuning mode {tune!r} needs a lambda ladder")
    if tune != "fixed" and alg not in ("fpfc", "fpfc-l1"):
        raise ConfigError("algorithm.tuning", "tuning is only available for fpfc and fpfc-l1")

    sb = _table(raw, "schedule")
    try:
        bs = sb.get("batch_size")
        if bs is not None and (not isinstance(bs, int) or bs < 1):
            raise ConfigError("schedule.batch_size", "expected a positive integer")
        schedule = Schedule(_get(sb, "rounds", "schedule", int, 100),
                            _get(sb, "participation", "schedule", str, "uniform"),
                            _get(sb, "eval_every", "schedule", int, 1), bs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("schedule", str(exc)) from None

    delay = None
    if "delay" in raw:
        db = _table(raw, "delay")
        slow = db.get("slow_devices", [])
        if not isinstance(slow, list) or not all(isinstance(s, int) for s in slow):
            raise ConfigError("delay.slow_devices", "expected an array of device ids")
        delay = DelayModel(_get(db, "max_delay", "delay", float, 20.0), tuple(slow),
                           _get(db, "slow_factor", "delay", float, 10.0))
        if delay.max_delay < 0 or delay.slow_factor <= 0:
            raise ConfigError("delay", "max_delay must be >= 0 and slow_factor > 0")
    if alg == "async-fpfc" and delay is None:
        raise ConfigError("delay", "async-fpfc requires a [delay] block")

    ob = _table(raw, "output")
    out = out_dir or os.environ.get("FPFC_OUT_DIR") or _get(ob, "dir", "output", str, "runs")
    dist = ob.get("distance_rounds", [0, 5, 50])
    if not isinstance(dist, list) or not all(isinstance(r, int) and r >= 0 for r in dist):
        raise ConfigError("output.distance_rounds", "expected an array of round numbers")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "expected a non-empty array of integers")
    if seed is not None:
        seeds = [seed]

    bb = _table(raw, "baseline")
    model = _table(raw, "model")
    return ExperimentConfig(dataset, alg, tune, hp, schedule, ladder, delay, seeds, Path(out),
                            tuple(sorted(set(dist))),
                            _get(ob, "wall_clock", "output", bool, False), dict(model),
                            _get(bb, "local_epochs", "baseline", int, None))


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML: {exc}") from None
    return parse_config(raw, path.parent, **overrides)


def build_federation(cfg: ExperimentConfig, seed: int):
    ds = cfg.dataset
    fractions = tuple(ds.get("split", DEFAULT_FRACTIONS))
    if "scenario" in ds:
        return gen_synthetic(ds["scenario"].upper(), seed, fractions=fractions)
    if "linear_clusters" in ds:
        p = ds["linear_clusters"]
        try:
            return gen_linear_clusters(p["m"], p["L"], p["n"], p["d"], p["b"], p["sigma"], seed,
                                       intercept=p.get("intercept", False), fractions=fractions)
        except KeyError as exc:
            raise ConfigError(f"dataset.linear_clusters.{exc.args[0]}", "missing required field")
    sources = []
    for src in ds["csv"]:
        path = Path(src["path"])
        if not path.is_absolute():
            path = ds["base_dir"] / path
        sources.append(CsvSource(path, src["response"], src["devices"], src.get("features")))
    return load_csv_federation(sources, seed, fractions=fractions,
                               pad_features_to=ds.get("pad_features_to"),
                               standardize=ds.get("standardize", True))


# ---------------------------------------------------------------------------
# outputs and their loaders
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def trace_row(trace: RoundTrace) -> list:
    return [_fmt(trace.round), _fmt(trace.lambda_current), _fmt(trace.active_count),
            _fmt(trace.train_loss), _fmt(trace.val_metric), _fmt(trace.test_metric),
            _fmt(trace.aug_lagrangian), _fmt(trace.num_clusters), _fmt(trace.ari),
            _fmt(trace.sim_time_s), _fmt(trace.wall_ms)]


class RoundsWriter:
    """Streams rows to ``rounds.csv`` so a diverged run leaves its prefix."""

    def __init__(self, path, wall_clock=False):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(ROUND_COLUMNS)
        self.wall_clock = wall_clock

    def write(self, trace: RoundTrace):
        if not self.wall_clock and trace.wall_ms:
            trace = RoundTrace(**{**trace.__dict__, "wall_ms": 0.0})
        self.writer.writerow(trace_row(trace))

    def close(self):
        self.fh.close()


def read_rounds_csv(path) -> list:
    """Parse ``rounds.csv`` back into dictionaries with numeric values."""
    ints = {"round", "active_count", "num_clusters"}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != ROUND_COLUMNS:
            raise ValueError(f"unexpected rounds.csv header {header}")
        return [{k: (int(v) if k in ints else float(v)) for k, v in zip(header, row)}
                for row in reader]


def write_distances(path, omega):
    np.savetxt(path, pairwise_distance_matrix(omega), delimiter=",", fmt="%.17g")


def read_distances(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_clusters(path, assignment: ClusterAssignment, extra: dict):
    rec = {**extra, **assignment.to_record()}
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def read_clusters(path) -> tuple:
    rec = json.loads(Path(path).read_text())
    return ClusterAssignment.from_record(rec), rec


def read_summary(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    metric: float
    num_clusters: float
    ari: float
    selected_lambda: float
    status: str = "ok"


@dataclass
class RunReport:
    algorithm: str
    metric_name: str
    seeds: list

    def _stat(self, attr):
        vals = np.array([getattr(s, attr) for s in self.seeds], dtype=np.float64)
        if np.all(np.isnan(vals)):
            return math.nan, math.nan
        return float(np.nanmean(vals)), float(np.nanstd(vals)) if len(vals) > 1 else 0.0

    def summary(self) -> dict:
        out = {"algorithm": self.algorithm, "metric": self.metric_name, "n_seeds": len(self.seeds)}
        for attr in ("metric", "num_clusters", "ari"):
            out[f"{attr}_mean"], out[f"{attr}_std"] = self._stat(attr)
        return out

    def table(self) -> str:
        s = self.summary()
        name = self.metric_name
        scale = 100.0 if name == "Acc" else 1.0
        unit = "%" if name == "Acc" else ""
        lines = [f"{'algorithm':<12} {name:>18} {'Num':>14} {'ARI':>14}",
                 f"{self.algorithm:<12} "
                 f"{s['metric_mean'] * scale:>9.2f}{unit} ± {s['metric_std'] * scale:<5.2f} "
                 f"{s['num_clusters_mean']:>6.2f} ± {s['num_clusters_std']:<5.2f} "
                 f"{s['ari_mean']:>6.2f} ± {s['ari_std']:<5.2f}"]
        return "\n".join(lines)


class _Snapshots:
    def __init__(self, directory, rounds):
        self.directory = Path(directory)
        self.rounds = set(rounds)

    def maybe(self, k, omega):
        if k in self.rounds:
            write_distances(self.directory / f"distances_{k}.csv", omega)

    def final(self, omega):
        write_distances(self.directory / "distances_final.csv", omega)


def _clusters_of(fed, state, hp):
    assignment = extract_clusters(state.pairwise, fed.sample_sizes("train"), state.omega, hp.nu)
    ari = (adjusted_rand_index(assignment.labels, fed.true_labels)
           if fed.true_labels is not None and fed.m >= 2 else math.nan)
    return assignment, ari


def run_seed(cfg: ExperimentConfig, seed: int, directory: Path) -> SeedResult:
    fed = build_federation(cfg, seed)
    directory.mkdir(parents=True, exist_ok=True)
    snaps = _Snapshots(directory, cfg.distance_rounds)
    writer = RoundsWriter(directory / "rounds.csv", cfg.wall_clock)
    kind = PenaltyKind.GROUP_L1 if cfg.algorithm == "fpfc-l1" else PenaltyKind.SMOOTHED_SCAD
    hp = cfg.hp
    try:
        if cfg.algorithm in ("fpfc", "fpfc-l1"):
            state, lam = _run_sync(cfg, fed, seed, kind, writer, snaps, directory)
            hp = hp.replace(lam=lam)
        elif cfg.algorithm == "async-fpfc":
            snaps.maybe(0, np.tile(initial_omega(fed.spec.d, seed), (fed.m, 1)))

            def hook(st, trace):
                writer.write(trace)
                snaps.maybe(st.round, st.omega)

            state, _ = run_async_fpfc(None, fed, hp, cfg.schedule.rounds, cfg.delay, seed,
                                      kind=kind, eval_every=cfg.schedule.eval_every,
                                      batch_size=cfg.schedule.batch_size, callback=hook,
                                      record_wall=cfg.wall_clock)
            lam = hp.lam
        else:
            return _run_baseline(cfg, fed, seed, writer, snaps, directory)
    except DivergenceError as exc:
        (directory / "status.json").write_text(json.dumps(
            {"status": "diverged", "message": str(exc), "device": exc.device,
             "round": exc.round}, indent=2) + "\n")
        raise
    finally:
        writer.close()
    snaps.final(state.omega)
    assignment, ari = _clusters_of(fed, state, hp)
    write_clusters(directory / "clusters.json", assignment,
                   {"seed": seed, "lambda": lam, "nu": hp.nu, "ari": ari,
                    "algorithm": cfg.algorithm})
    final = evaluate_state(state, fed, hp, kind)
    (directory / "status.json").write_text(json.dumps({"status": "ok"}) + "\n")
    return SeedResult(seed, final.test_metric, assignment.n_clusters, ari, lam)


def _run_sync(cfg, fed, seed, kind, writer, snaps, directory):
    hp = cfg.hp
    if cfg.tuning == "fixed":
        eng = FPFCEngine(fed, hp, cfg.schedule, kind=kind, seed=seed, delay=cfg.delay,
                         record_wall=cfg.wall_clock)
        snaps.maybe(0, eng.state.omega)
        try:
            every = cfg.schedule.eval_every
            for r in range(cfg.schedule.rounds):
                t0 = time.perf_counter()
                active = eng.step()
                wall = (time.perf_counter() - t0) * 1e3 if cfg.wall_clock else 0.0
                snaps.maybe(eng.state.round, eng.state.omega)
                if eng.state.round % every == 0 or r == cfg.schedule.rounds - 1:
                    writer.write(eng.evaluate(tuple(int(i) for i in active), wall))
        finally:
            eng.close()
        return eng.state, hp.lam

    def hook(eng, trace):
        writer.write(trace)
        snaps.maybe(trace.round, eng.state.omega)

    tuner = tune_warmup if cfg.tuning == "warmup" else tune_separate
    snaps.maybe(0, np.tile(initial_omega(fed.spec.d, seed), (fed.m, 1)))
    res = tuner(fed, hp, cfg.ladder, cfg.schedule, seed, kind=kind, callback=hook,
                record_wall=cfg.wall_clock)
    (directory / "tuning.json").write_text(res.to_json() + "\n")
    return res.best_state, res.selected_lambda


def _run_baseline(cfg, fed, seed, writer, snaps, directory):
    hp = cfg.hp
    T = hp.local_epochs.epochs(0, 0)
    snaps.maybe(0, np.tile(initial_omega(fed.spec.d, seed), (fed.m, 1)))
    if cfg.algorithm == "fedavg":
        res = run_fedavg(fed, cfg.schedule.rounds, T, hp.alpha, hp.tau, seed,
                         participation=cfg.schedule.participation,
                         eval_every=cfg.schedule.eval_every)
        for k, loss, test in res.traces:
            writer.write(RoundTrace(k, tuple(range(math.ceil(hp.tau * fed.m - 1e-9))), 0.0, loss,
                                    math.nan, test, math.nan, 1, math.nan))
    else:
        epochs = cfg.local_epochs_baseline or cfg.schedule.rounds * T
        res = run_local_baseline(fed, epochs, hp.alpha, seed)
        writer.write(RoundTrace(epochs, tuple(range(fed.m)), 0.0, float(res.train_loss.mean()),
                                res.val, res.test, math.nan, fed.m, math.nan))
    snaps.final(res.omega)
    (directory / "status.json").write_text(json.dumps({"status": "ok"}) + "\n")
    return SeedResult(seed, res.test, math.nan, math.nan, 0.0)


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    metric_name = None
    for seed in cfg.seeds:
        log.info("seed %d: %s (%s tuning)", seed, cfg.algorithm, cfg.tuning)
        res = run_seed(cfg, seed, cfg.out_dir / f"seed_{seed}")
        results.append(res)
        log.info("seed %d: metric=%.4f num=%s ari=%s", seed, res.metric, res.num_clusters, res.ari)
        if metric_name is None:
            metric_name = "Acc" if build_federation(cfg, seed).spec.maximize else "RMSE"
    report = RunReport(cfg.algorithm, metric_name, results)
    _write_summary(cfg.out_dir / "summary.csv", report)
    return report


def _write_summary(path, report: RunReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "metric", "num_clusters", "ari", "selected_lambda"])
        for s in report.seeds:
            w.writerow([s.seed, _fmt(s.metric), _fmt(s.num_clusters), _fmt(s.ari),
                        _fmt(s.selected_lambda)])
        summ = report.summary()
        for stat in ("mean", "std"):
            w.writerow([stat, _fmt(summ[f"metric_{stat}"]), _fmt(summ[f"num_clusters_{stat}"]),
                        _fmt(summ[f"ari_{stat}"]), ""])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpfc-run",
                                description="Run a clustered federated learning experiment.")
    p.add_argument("--config", required=True, type=Path, help="TOML experiment file")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out-dir", type=Path,
                   help="output directory (falls back to $FPFC_OUT_DIR, then output.dir)")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--tuning", choices=TUNING)
    p.add_argument("--quiet", action="store_true", help="suppress progress and the summary table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir,
                          algorithm=args.algorithm, tuning=args.tuning)
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InvalidHyperparameterError as exc:
        print(f"config error: hyperparams: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        print(report.table())
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
