"""Time the server-side pair kernels under numba and plain numpy.

    python benchmarks/bench_kernels.py --m 100 200 --d 610 --repeat 5

Every kernel is run once per backend before timing (numba compiles on first
call), then the best of ``--repeat`` runs is reported together with the
max abs difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from fpfc import _kernels
from fpfc.core import pair_arrays
from fpfc.penalty import PenaltyKind


def make_problem(m, d, seed=0):
    rng = np.random.default_rng(seed)
    I, J = pair_arrays(m)
    omega = rng.normal(size=(m, d))
    # mix of fused and separated pairs so every prox branch is exercised
    theta = rng.normal(size=(len(I), d)) * rng.choice([0.0, 0.01, 1.0], size=(len(I), 1))
    dual = rng.normal(scale=0.1, size=(len(I), d))
    active = np.sort(rng.choice(m, size=max(1, int(0.3 * m)), replace=False))
    rows = np.flatnonzero(np.isin(I, active) | np.isin(J, active))
    return dict(omega=omega, theta=theta, dual=dual, I=I, J=J, rows=rows)


def cases(be, p):
    o, th, v, I, J, rows = p["omega"], p["theta"], p["dual"], p["I"], p["J"], p["rows"]
    rows_0 = np.flatnonzero((I == 0) | (J == 0))

    def server():
        t, d = th.copy(), v.copy()
        be.server_update_rows(o, t, d, I, J, rows, 0.5, 3.7, 1e-4, 1.0, PenaltyKind.SMOOTHED_SCAD)
        return t

    return {
        "server_update": server,
        "zeta_all": lambda: be.zeta_all(o, th, v, I, J, 1.0),
        "zeta_one": lambda: be.zeta_one(0, o, th, v, I, rows_0, 1.0),
        "pair_terms": lambda: be.pair_terms(o, th, v, I, J)[2],
        "pairwise_distances": lambda: be.pairwise_distances(o),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--d", type=int, default=610)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    nb = _kernels.get_backend(True)
    npb = _kernels.get_backend(False)
    if not nb.use_numba:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<20}{'m':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max diff':>12}")
    for m in args.m:
        p = make_problem(m, args.d)
        fast, slow = cases(nb, p), cases(npb, p)
        for name in fast:
            a, b = np.asarray(fast[name]()), np.asarray(slow[name]())  # warm-up / compile
            diff = float(np.max(np.abs(a - b))) if a.size else 0.0
            t_nb = best_of(fast[name], args.repeat)
            t_np = best_of(slow[name], args.repeat)
            print(f"{name:<20}{m:>6}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}"
                  f"{t_np / t_nb:>9.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
