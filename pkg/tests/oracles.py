"""Slow but obviously-correct reference computations used by the tests.

Nothing here imports the package's numerical kernels; each oracle restates
the definition directly so that agreement is meaningful.
"""
import itertools
import math

import numpy as np
from scipy.optimize import minimize_scalar


def scad_ref(t, lam, a):
    t = abs(t)
    if t <= lam:
        return lam * t
    if t <= a * lam:
        return (a * lam * t - 0.5 * (t * t + lam * lam)) / (a - 1)
    return lam * lam * (a + 1) / 2


def smoothed_scad_ref(t, lam, a, xi):
    if lam == 0:
        return 0.0
    if abs(t) <= xi:
        return lam / (2 * xi) * t * t + xi * lam / 2
    return scad_ref(t, lam, a)


def prox_radius_1d(r, pen, rho, hi=None):
    """argmin over s >= 0 of pen(s) + rho/2 (s - r)^2.

    Dense grid on [0, hi] followed by bounded Brent polishing around the
    best few grid points (the objective can be non-convex in s).
    """
    hi = max(r, 1e-12) * 1.5 + 1.0 if hi is None else hi
    obj = lambda s: pen(s) + 0.5 * rho * (s - r) ** 2
    grid = np.linspace(0.0, hi, 4001)
    vals = np.array([obj(s) for s in grid])
    best_s, best_v = 0.0, obj(0.0)
    step = grid[1] - grid[0]
    for k in np.argsort(vals)[:5]:
        lo, up = max(0.0, grid[k] - step), grid[k] + step
        res = minimize_scalar(obj, bounds=(lo, up), method="bounded",
                              options={"xatol": 1e-13, "maxiter": 500})
        for s, v in ((res.x, res.fun), (grid[k], vals[k])):
            if v < best_v:
                best_s, best_v = s, v
    return best_s


def prox_vector_ref(delta, pen, rho):
    delta = np.asarray(delta, dtype=float)
    r = float(np.sqrt(np.sum(delta * delta)))
    if r == 0:
        return np.zeros_like(delta)
    return prox_radius_1d(r, pen, rho) / r * delta


def ari_bruteforce(pred, truth):
    """Adjusted Rand index from explicit pair enumeration."""
    n = len(pred)
    both = only_p = only_t = 0
    for i, j in itertools.combinations(range(n), 2):
        sp = pred[i] == pred[j]
        st = truth[i] == truth[j]
        both += sp and st
        only_p += sp and not st
        only_t += st and not sp
    total = math.comb(n, 2)
    a_pairs = both + only_p
    b_pairs = both + only_t
    expected = a_pairs * b_pairs / total
    max_index = (a_pairs + b_pairs) / 2
    if max_index == expected:
        return 1.0 if both == max_index else 0.0
    return (both - expected) / (max_index - expected)


def central_diff_grad(fun, x, rel=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def aug_lagrangian_ref(f_total, omega, theta_of, dual_of, lam, a, xi, rho, penalty="scad"):
    """Double loop over every ordered pair, diagonal included."""
    m = omega.shape[0]
    acc = 0.0
    for i in range(m):
        for j in range(m):
            th = theta_of(i, j)
            v = dual_of(i, j)
            r = omega[i] - omega[j] - th
            nrm = float(np.sqrt(th @ th))
            g = smoothed_scad_ref(nrm, lam, a, xi) if penalty == "scad" else lam * nrm
            acc += g + float(v @ r) + 0.5 * rho * float(r @ r)
    return f_total + acc / (2 * m)


def zeta_ref(omega, theta_of, dual_of, rho):
    m = omega.shape[0]
    return np.array([
        sum(omega[j] + theta_of(i, j) - dual_of(i, j) / rho for j in range(m)) / m
        for i in range(m)
    ])


def smoothed_scad_vec(t, lam, a, xi):
    """Vectorised restatement of :func:`smoothed_scad_ref` for dense grids."""
    t = np.abs(np.asarray(t, dtype=float))
    if lam == 0:
        return np.zeros_like(t)
    scad = np.where(t <= lam, lam * t,
                    np.where(t <= a * lam, (a * lam * t - 0.5 * (t * t + lam * lam)) / (a - 1),
                             lam * lam * (a + 1) / 2))
    return np.where(t <= xi, lam / (2 * xi) * t * t + xi * lam / 2, scad)


def prox_radius_fast(r, pen_vec, pen, rho, hi=None):
    """Same search as :func:`prox_radius_1d` with a vectorised grid pass."""
    hi = max(r, 1e-12) * 1.5 + 1.0 if hi is None else hi
    grid = np.linspace(0.0, hi, 4001)
    vals = pen_vec(grid) + 0.5 * rho * (grid - r) ** 2
    obj = lambda s: pen(s) + 0.5 * rho * (s - r) ** 2
    step = grid[1] - grid[0]
    best_s, best_v = 0.0, obj(0.0)
    for k in np.argsort(vals)[:3]:
        res = minimize_scalar(obj, bounds=(max(0.0, grid[k] - step), grid[k] + step),
                              method="bounded", options={"xatol": 1e-13, "maxiter": 500})
        for s, v in ((res.x, res.fun), (grid[k], vals[k])):
            if v < best_v:
                best_s, best_v = s, v
    return best_s
