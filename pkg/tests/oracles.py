"""Independent reference solvers used only by the tests."""
import itertools

import numpy as np
from scipy.optimize import linprog


def lp_check_regression(X, y, taus, w, lam, d):
    """Primal LP for ``sum_k w_k sum_i rho_tau_k(y - X b - b_k) + n lam sum d |b|`` (raw scale)."""
    n, p = X.shape
    K = len(taus)
    nv = 2 * p + K + 2 * K * n
    c = np.zeros(nv)
    c[:p] = n * lam * np.asarray(d)
    c[p:2 * p] = n * lam * np.asarray(d)
    A = np.zeros((K * n, nv))
    b = np.zeros(K * n)
    for k in range(K):
        rows = slice(k * n, (k + 1) * n)
        A[rows, :p] = X
        A[rows, p:2 * p] = -X
        A[rows, 2 * p + k] = 1
        up = 2 * p + K + k * n
        dn = 2 * p + K + K * n + k * n
        A[rows, up:up + n] = np.eye(n)
        A[rows, dn:dn + n] = -np.eye(n)
        c[up:up + n] = w[k] * taus[k]
        c[dn:dn + n] = w[k] * (1 - taus[k])
        b[rows] = y
    bounds = [(0, None)] * (2 * p) + [(None, None)] * K + [(0, None)] * (2 * K * n)
    r = linprog(c, A_eq=A, b_eq=b, bounds=bounds, method="highs")
    assert r.status == 0
    return r.x[:p] - r.x[p:2 * p], r.x[2 * p:2 * p + K], r.fun


def grid_minimum(f, ranges, steps):
    """Coarse lattice search followed by one refinement around the best point."""
    axes = [np.linspace(lo, hi, steps) for lo, hi in ranges]
    best, arg = np.inf, None
    for pt in itertools.product(*axes):
        v = f(np.array(pt))
        if v < best:
            best, arg = v, np.array(pt)
    width = [(hi - lo) / (steps - 1) for lo, hi in ranges]
    axes = [np.linspace(a - wd, a + wd, steps) for a, wd in zip(arg, width)]
    for pt in itertools.product(*axes):
        v = f(np.array(pt))
        if v < best:
            best, arg = v, np.array(pt)
    return best, arg


def grid_minimum_batch(f, ranges, steps, rounds=4):
    """Vectorized lattice search; ``f`` maps an (m, dim) array of points to m values.

    Each round re-centres a lattice of the same size on the incumbent with
    the spacing shrunk to two old cells, so the result is an upper bound on
    the true minimum that tightens with ``rounds``.
    """
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    best, arg = np.inf, None
    for _ in range(rounds):
        axes = [np.linspace(a, b, steps) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(ranges))
        vals = f(pts)
        i = int(np.argmin(vals))
        if vals[i] < best:
            best, arg = float(vals[i]), pts[i]
        cell = (hi - lo) / (steps - 1)
        lo, hi = arg - 2 * cell, arg + 2 * cell
    return best, arg
