"""Compiled inner loops for the solver.

Everything here works on the standardized problem and plain float arrays;
the Python layer in ``solver`` owns validation, scaling and bookkeeping.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _sweep(H, g, pen, beta, Hb, idx):
    p = beta.shape[0]
    worst = 0.0
    for jj in range(idx.shape[0]):
        j = idx[jj]
        hjj = H[j, j]
        if hjj <= 0.0:
            new = 0.0
        else:
            new = _soft(g[j] - Hb[j] + hjj * beta[j], pen[j]) / hjj
        delta = new - beta[j]
        if delta != 0.0:
            for l in range(p):
                Hb[l] += delta * H[l, j]
            beta[j] = new
            ch = abs(delta) * np.sqrt(max(hjj, 0.0))
            if ch > worst:
                worst = ch
    return worst


@njit(cache=True)
def cd_gram(H, g, pen, beta, Hb, tol, max_sweeps):
    """Cyclic coordinate descent for ``0.5 b'Hb - g'b + sum_j pen_j |b_j|``.

    ``beta`` and ``Hb`` (= H @ beta) are updated in place.  Full sweeps
    alternate with sweeps restricted to the current nonzero set.  Returns the
    number of sweeps used; a value equal to ``max_sweeps`` means the
    tolerance was not reached.
    """
    p = beta.shape[0]
    full = np.arange(p)
    sweeps = 0
    while sweeps < max_sweeps:
        worst = _sweep(H, g, pen, beta, Hb, full)
        sweeps += 1
        if worst < tol:
            break
        act = np.nonzero(beta)[0]
        while sweeps < max_sweeps:
            worst = _sweep(H, g, pen, beta, Hb, act)
            sweeps += 1
            if worst < tol:
                break
    return sweeps


@njit(cache=True)
def composite_objective(X, y, theta, b, w_sq, lo, hi, fixed_b, free, pen):
    n = X.shape[0]
    xb = X @ theta
    obj = 0.0
    for i in range(n):
        r = y[i] - xb[i]
        obj += w_sq * r * r
        for k in range(lo.shape[0]):
            t = r - (b[k] if free[k] else fixed_b[k])
            obj += hi[k] * t if t > 0 else lo[k] * t
    for j in range(theta.shape[0]):
        obj += pen[j] * abs(theta[j])
    return obj


@njit(cache=True)
def admm(X, xmean, y, A, B_free, B_fixed, gy, w_sq, lo, hi, fixed_b, free, pen,
         theta, b, z, u, rho, eps_abs, eps_rel, max_iter, check_every,
         cd_tol, cd_sweeps, adapt_rho, best_theta, best_b, history):
    """Scaled ADMM on the per-component consensus ``z_k = y - X theta - b_k``.

    Non-squared component ``k`` enters as ``sum_i rho_k(z_ki)`` with slopes
    ``lo[k] < 0 < hi[k]``; free offsets are minimized out in the
    ``(theta, b)`` block, which then becomes a lasso on the Gram
    ``A + rho (B_free + B_fixed)`` solved by coordinate descent.

    Returns ``(status, iterations, rho, n_history)`` with status 1 when the
    primal/dual stopping rule was met and 0 when ``max_iter`` ran out.
    The best objective seen is tracked in ``best_theta``/``best_b`` and every
    improvement is appended to ``history``.
    """
    n, p = X.shape
    K = lo.shape[0]
    n_free = 0
    for k in range(K):
        if free[k]:
            n_free += 1
    H = A + rho * (B_free + B_fixed)
    Hb = H @ theta
    zold = np.empty_like(z)
    c_free = np.zeros(n)
    c_fixed = np.zeros(n)
    g = np.empty(p)
    xb = X @ theta
    n_hist = 0
    best = np.inf
    status = 0
    it = 0
    n_rho_changes = 0
    while it < max_iter:
        it += 1
        # (theta, b) block
        c_free[:] = 0.0
        c_fixed[:] = 0.0
        for k in range(K):
            if free[k]:
                for i in range(n):
                    c_free[i] += y[i] - z[k, i] + u[k, i]
            else:
                for i in range(n):
                    c_fixed[i] += y[i] - z[k, i] + u[k, i] - fixed_b[k]
        if n_free > 0:
            cbar = c_free.mean()
            for i in range(n):
                c_free[i] -= cbar
        g[:] = gy + rho * (X.T @ (c_free + c_fixed))
        cd_gram(H, g, pen, theta, Hb, cd_tol, cd_sweeps)
        xb = X @ theta
        mt = 0.0
        for j in range(p):
            mt += xmean[j] * theta[j]
        for k in range(K):
            if free[k]:
                s = 0.0
                for i in range(n):
                    s += y[i] - z[k, i] + u[k, i]
                b[k] = s / n - mt
        # z block (separable prox) and dual update
        zold[:, :] = z
        r2 = 0.0
        ax2 = 0.0
        z2 = 0.0
        for k in range(K):
            bk = b[k] if free[k] else fixed_b[k]
            up = hi[k] / rho
            dn = lo[k] / rho
            for i in range(n):
                ax = xb[i] + bk
                v = y[i] - ax + u[k, i]
                if v > up:
                    zk = v - up
                elif v < dn:
                    zk = v - dn
                else:
                    zk = 0.0
                z[k, i] = zk
                res = y[i] - ax - zk
                u[k, i] += res
                r2 += res * res
                ax2 += ax * ax
                z2 += zk * zk
        if it % check_every == 0 or it == max_iter:
            dz_sum = np.zeros(n)
            s_b = 0.0
            u_sum = np.zeros(n)
            su_b = 0.0
            for k in range(K):
                dk = 0.0
                uk = 0.0
                for i in range(n):
                    dz_sum[i] += z[k, i] - zold[k, i]
                    u_sum[i] += u[k, i]
                    dk += z[k, i] - zold[k, i]
                    uk += u[k, i]
                if free[k]:
                    s_b += dk * dk
                    su_b += uk * uk
            sd = X.T @ dz_sum
            su = X.T @ u_sum
            s_norm = rho * np.sqrt(np.sum(sd * sd) + s_b)
            r_norm = np.sqrt(r2)
            y2 = 0.0
            for i in range(n):
                y2 += y[i] * y[i]
            eps_pri = np.sqrt(n * K) * eps_abs + eps_rel * np.sqrt(max(ax2, z2, K * y2))
            eps_dual = np.sqrt(p + n_free) * eps_abs + eps_rel * rho * np.sqrt(np.sum(su * su) + su_b)
            obj = composite_objective(X, y, theta, b, w_sq, lo, hi, fixed_b, free, pen)
            if obj < best:
                best = obj
                best_theta[:] = theta
                best_b[:] = b
                if n_hist < history.shape[0]:
                    history[n_hist] = obj
                    n_hist += 1
            if r_norm <= eps_pri and s_norm <= eps_dual:
                status = 1
                break
            if adapt_rho and n_rho_changes < 40:
                scale = 0.0
                if r_norm > 10.0 * s_norm * (eps_pri / max(eps_dual, 1e-300)):
                    scale = 2.0
                elif s_norm > 10.0 * r_norm * (eps_dual / max(eps_pri, 1e-300)):
                    scale = 0.5
                if scale != 0.0:
                    rho *= scale
                    for k in range(K):
                        for i in range(n):
                            u[k, i] /= scale
                    H = A + rho * (B_free + B_fixed)
                    Hb = H @ theta
                    n_rho_changes += 1
    return status, it, rho, n_hist
