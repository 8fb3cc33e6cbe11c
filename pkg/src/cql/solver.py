"""Penalized composite regression solver.

Minimizes

    L_n(beta, b) = sum_i rho_w(y_i - x_i' beta; b) + n * lam * sum_j d_j |beta_j|

over the coefficients and the (unpenalized) component offsets ``b``.  With
a squared-only basis this is a lasso and is solved by coordinate descent.
Otherwise every kinked component gets its own consensus copy of the
residual vector and the problem is split by ADMM; the ``(beta, b)`` block is
a lasso solved by coordinate descent on a cached Gram matrix.  Once ADMM
has settled, the face identified by the active coefficients and the
residuals sitting on kinks is solved exactly ("polish"), which gives an
exact minimizer whenever the identified face is the right one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .errors import ContractError, InputError
from .losses import CompositeWeights, LossBasis, as_weights, composite_loss, composite_subgradient
from .penalty import PenaltyRule, PenaltyVector, penalty_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise InputError("X must be a 2-d array")
        if X.shape[0] != y.shape[0]:
            raise InputError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.shape[0] < 2:
            raise InputError("need at least two observations")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InputError("data contain non-finite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows=None, cols=None) -> "Dataset":
        X, y = self.X, self.y
        if rows is not None:
            X, y = X[rows], y[rows]
        if cols is not None:
            X = X[:, cols]
        return Dataset(X, y)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-7
    max_iter: int = 10000
    admm_rho: float = 1.0
    standardize: bool = True
    polish: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ContractError("tol must be positive")
        if self.max_iter < 1:
            raise ContractError("max_iter must be at least 1")
        if not self.admm_rho > 0:
            raise ContractError("admm_rho must be positive")


@dataclass
class FitResult:
    beta: np.ndarray
    offsets: np.ndarray
    residuals: np.ndarray
    active_set: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    col_scale: np.ndarray | None = None
    polished: bool = False
    lam: float = 0.0
    # solver state for warm starts: (theta, b_active, z, u, rho)
    _state: tuple | None = field(default=None, repr=False)


@dataclass(frozen=True)
class KktCertificate:
    stationarity_gap: float
    inactive_score: float
    threshold: float
    passed: bool
    n_kinks: int = 0
    unpenalized_inactive: int = 0


# --------------------------------------------------------------------------
# design preprocessing

class _Design:
    """Standardized design with cached Gram matrices."""

    def __init__(self, X: np.ndarray, standardize: bool):
        n, p = X.shape
        if standardize:
            scale = np.sqrt(np.mean(X * X, axis=0))
            scale[scale == 0] = 1.0
        else:
            scale = np.ones(p)
        self.scale = scale
        self.Xs = np.ascontiguousarray(X / scale)
        self.mean = self.Xs.mean(axis=0)
        self.n, self.p = n, p
        self._gram = None
        self._gram_c = None

    @property
    def gram(self):
        if self._gram is None:
            self._gram = self.Xs.T @ self.Xs
        return self._gram

    @property
    def gram_centered(self):
        if self._gram_c is None:
            self._gram_c = self.gram - self.n * np.outer(self.mean, self.mean)
        return self._gram_c

    def constant_columns(self):
        sd = np.sqrt(np.maximum(np.diag(self.gram_centered), 0.0) / self.n)
        nz = np.abs(self.mean) > 0
        return np.nonzero(nz & (sd <= 1e-12 * np.maximum(np.abs(self.mean), 1.0)))[0]


def _components(basis: LossBasis, w: CompositeWeights, free_offsets: bool):
    """Split a weighted basis into the squared weight and kinked-component arrays."""
    w_sq = 0.0
    idx, lo, hi, fixed_b = [], [], [], []
    for k, (wk, comp) in enumerate(zip(w.w, basis)):
        if wk == 0.0:
            continue
        if comp.kind == "squared":
            w_sq += wk
        elif comp.kind == "absolute":
            idx.append(k), lo.append(-wk), hi.append(wk), fixed_b.append(comp.offset)
        else:
            idx.append(k), lo.append(wk * (comp.tau - 1.0)), hi.append(wk * comp.tau)
            fixed_b.append(comp.offset)
    free = np.full(len(idx), bool(free_offsets))
    return w_sq, np.array(idx, dtype=int), np.array(lo), np.array(hi), np.array(fixed_b), free


def _init_offsets(basis, idx, r):
    out = np.empty(len(idx))
    for m, k in enumerate(idx):
        comp = basis.components[k]
        out[m] = np.quantile(r, comp.tau if comp.kind == "quantile" else 0.5)
    return out


def objective_value(data: Dataset, basis: LossBasis, w, pen: PenaltyVector, beta,
                    offsets=None, col_scale=None) -> float:
    """Penalized objective on the original scale.

    The penalty on coefficient ``j`` is ``n lam d_j s_j |beta_j|`` where
    ``s_j`` is the column scale used by the (standardized) fit.
    """
    w = as_weights(w, "unconstrained")
    beta = np.asarray(beta, dtype=float)
    b = basis if offsets is None else basis.with_offsets(offsets)
    s = np.ones(data.p) if col_scale is None else np.asarray(col_scale)
    r = data.y - data.X @ beta
    return float(np.sum(composite_loss(b, w, r)) + data.n * pen.lam * np.sum(pen.d * s * np.abs(beta)))


# --------------------------------------------------------------------------
# fitting

def _cd_tol(y, n):
    return 1e-10 * np.sqrt(n) * max(float(np.std(y)), 1e-12)


def _finish(data, design, basis, w, pen, theta, b_act, idx, iterations, converged, history,
            polished, state):
    beta = theta / design.scale
    r = data.y - data.X @ beta
    offsets = np.zeros(basis.K)
    for k, comp in enumerate(basis):
        if comp.kind != "squared":
            offsets[k] = np.quantile(r, comp.tau if comp.kind == "quantile" else 0.5)
    offsets[idx] = b_act
    obj = objective_value(data, basis, w, pen, beta, offsets, design.scale)
    return FitResult(beta=beta, offsets=offsets, residuals=r, active_set=np.nonzero(beta)[0],
                     objective=obj, iterations=int(iterations), converged=bool(converged),
                     history=np.asarray(history, dtype=float), col_scale=design.scale.copy(),
                     polished=polished, lam=pen.lam, _state=state)


def _fit_squared(data, design, basis, w, pen, w_sq, opts, init):
    n, p = design.n, design.p
    H = 2.0 * w_sq * design.gram
    g = 2.0 * w_sq * (design.Xs.T @ data.y)
    pen_std = n * pen.lam * pen.d
    theta = np.zeros(p) if init is None else np.array(init[0], dtype=float)
    Hb = H @ theta
    sweeps = 0
    history = []
    tol = _cd_tol(data.y, n)
    chunk = 50
    # sweeps are run in chunks so that an objective trace can be recorded
    while sweeps < opts.max_iter:
        used = _kernels.cd_gram(H, g, pen_std, theta, Hb, tol, min(chunk, opts.max_iter - sweeps))
        sweeps += used
        history.append(0.5 * theta @ Hb - g @ theta + np.sum(pen_std * np.abs(theta)))
        if used < chunk:
            break
    converged = sweeps < opts.max_iter
    hist = np.array(history) + w_sq * float(data.y @ data.y)
    state = (theta.copy(), np.zeros(0), None, None, None)
    return _finish(data, design, basis, w, pen, theta, np.zeros(0), np.zeros(0, dtype=int),
                   sweeps, converged, hist, False, state)


def _reject(reason):
    logger.debug("polish rejected: %s", reason)
    return None


def _polish(design, y, w_sq, lo, hi, fixed_b, free, pen_std, theta0, b0, side):
    """Solve the face problem identified by an ADMM iterate exactly.

    The face fixes the sign pattern of the nonzero coefficients and, through
    ``side`` (+1, -1 or 0 per component and observation), the side of every
    residual that is off its kink; residuals with side 0 sit on their kinks.  Returns ``(theta, b)`` when the face solution
    satisfies the full optimality conditions, else ``None``.
    """
    X = design.Xs
    n, p = X.shape
    K = len(lo)
    A = np.nonzero(theta0)[0]
    sA = np.sign(theta0[A])
    F = np.nonzero(free)[0]
    nA, nF = len(A), len(F)
    kink = side == 0
    slope = np.where(side > 0, hi[:, None], lo[:, None])
    slope[kink] = 0.0
    XA = X[:, A]
    # gradient of the face objective: H x - q
    H = np.zeros((nA + nF, nA + nF))
    H[:nA, :nA] = 2.0 * w_sq * design.gram[np.ix_(A, A)]
    q = np.zeros(nA + nF)
    sl_tot = slope.sum(axis=0)
    q[:nA] = 2.0 * w_sq * (XA.T @ y) + XA.T @ sl_tot - pen_std[A] * sA
    q[nA:] = slope[F].sum(axis=1)
    kk, ii = np.nonzero(kink)
    m = len(kk)
    E = np.zeros((m, nA + nF))
    E[:, :nA] = XA[ii]
    fpos = -np.ones(K, dtype=int)
    fpos[F] = np.arange(nF)
    e = y[ii].copy()
    for row, k in enumerate(kk):
        if free[k]:
            E[row, nA + fpos[k]] = 1.0
        else:
            e[row] -= fixed_b[k]
    x0 = np.concatenate([theta0[A], b0[F]])
    KKT = np.zeros((nA + nF + m, nA + nF + m))
    KKT[:nA + nF, :nA + nF] = H
    KKT[:nA + nF, nA + nF:] = E.T
    KKT[nA + nF:, :nA + nF] = E
    rhs = np.concatenate([q - H @ x0, e - E @ x0])
    if nA + nF + m > 4 * (nA + nF) + 50:
        return _reject("face too large")
    atol = 1e-9 * (1 + np.abs(rhs).max())

    def consistent(sol):
        return np.all(np.isfinite(sol)) and np.allclose(KKT @ sol, rhs, rtol=1e-9, atol=atol)

    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol = np.full(rhs.shape, np.nan)
    if not consistent(sol):
        # flat directions (e.g. a non-unique quantile offset): minimum-norm step
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        if not consistent(sol):
            return _reject("inconsistent face system")
    x = x0 + sol[:nA + nF]
    gk = -sol[nA + nF:]
    wscale = max(np.abs(lo).max(), np.abs(hi).max())
    gtol = 1e-8 * wscale
    if np.any(gk < lo[kk] - gtol) or np.any(gk > hi[kk] + gtol):
        return _reject("kink subgradient out of range")
    gk = np.clip(gk, lo[kk], hi[kk])
    theta = np.zeros(p)
    theta[A] = x[:nA]
    if np.any(theta[A] * sA <= 0):
        return _reject("sign change")
    b = b0.copy()
    b[F] = x[nA:]
    xb = X @ theta
    bb = np.where(free, b, fixed_b)
    t = y[None, :] - xb[None, :] - bb[:, None]
    scale = 1e-9 * (1.0 + np.abs(y).max())
    if np.any((side > 0) & (t < -scale)) or np.any((side < 0) & (t > scale)):
        return _reject("residual side change")
    # full subgradient check on the inactive coordinates
    g_res = slope.copy()
    g_res[kk, ii] = gk
    grad = 2.0 * w_sq * (X.T @ (xb - y)) - X.T @ g_res.sum(axis=0)
    inactive = np.ones(p, dtype=bool)
    inactive[A] = False
    gscale = 1e-8 * (1.0 + np.abs(grad).max())
    if np.any(np.abs(grad[inactive]) > pen_std[inactive] * (1 + 1e-9) + gscale):
        return _reject("inactive bound")
    return theta, b


def _lp_polish(design, y, lo, hi, fixed_b, free, pen_std, work, max_rounds=30):
    """Exact solve of a piecewise-linear problem by a working-set dual LP.

    Without a squared component the problem is an LP whose dual is

        max  sum_k (y - b_k)' g_k   s.t.  |X_W' sum_k g_k| <= pen_W,
             1'g_k = 0 (free k),  lo_k <= g_k <= hi_k,

    where ``g`` are the kink subgradients.  It is solved over the columns in
    ``work``; the coefficients and free offsets are read off the constraint
    marginals.  A column outside ``work`` that violates its dual constraint
    joins the working set.  On exit the primal value equals the dual value
    and ``g`` is dual feasible for all columns, which certifies optimality.
    Returns ``(theta, b, g)`` or ``None``.
    """
    X = design.Xs
    n, p = X.shape
    K = len(lo)
    F = np.nonzero(free)[0]
    nF = len(F)
    work = np.array(sorted(set(int(j) for j in work)), dtype=int)
    A_eq = np.zeros((nF, K * n))
    for m, k in enumerate(F):
        A_eq[m, k * n:(k + 1) * n] = 1.0
    bb = np.where(free, 0.0, fixed_b)
    c = -(y[None, :] - bb[:, None]).ravel()
    bounds = np.column_stack([np.repeat(lo, n), np.repeat(hi, n)])
    for _ in range(max_rounds):
        nW = len(work)
        if nW:
            XT = np.tile(X[:, work].T, (1, K))
            A_ub, b_ub = np.vstack([XT, -XT]), np.concatenate([pen_std[work], pen_std[work]])
        else:
            A_ub = b_ub = None
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq if nF else None,
                      b_eq=np.zeros(nF) if nF else None, bounds=bounds, method="highs")
        if res.status != 0:
            return _reject(f"LP solver status {res.status}")
        g = res.x.reshape(K, n)
        grad = X.T @ g.sum(axis=0)
        viol = np.abs(grad) - pen_std
        viol[work] = -np.inf
        bad = np.nonzero(viol > 1e-9 * (1.0 + np.abs(grad).max()))[0]
        if len(bad):
            bad = bad[np.argsort(-viol[bad])][:max(10, nW)]
            work = np.union1d(work, bad)
            continue
        theta = np.zeros(p)
        if nW:
            mu = res.ineqlin.marginals
            theta[work] = mu[nW:] - mu[:nW]
        b = fixed_b.astype(float).copy()
        if nF:
            b[F] = -res.eqlin.marginals
        dual = -res.fun
        primal = _kernels.composite_objective(X, y, theta, b, 0.0, lo, hi, fixed_b, free, pen_std)
        if primal - dual > 1e-9 * max(abs(dual), 1.0):
            return _reject("duality gap after LP")
        return theta, b, g
    return _reject("working-set LP did not settle")


def _faces(design, y, theta, b, z, fixed_b, free, extra=True):
    """Candidate faces from an ADMM iterate, most trusted first."""
    yield theta, np.sign(z)
    if not extra:
        return
    bb = np.where(free, b, fixed_b)
    t = y[None, :] - (design.Xs @ theta)[None, :] - bb[:, None]
    at = np.abs(t).ravel()
    order = np.argsort(at, kind="stable")
    nA = int(np.count_nonzero(theta))
    nF = int(np.count_nonzero(free))
    seen = set()
    # vertex-type solutions put exactly (#active + #free offsets) residuals on kinks
    for m in (nA + nF, nA + nF - 1, nA + nF + 1, nA + nF - 2, nA + nF - 3):
        if m < 0 or m >= at.size or m in seen:
            continue
        seen.add(m)
        side = np.sign(t).ravel()
        side[order[:m]] = 0.0
        yield theta, side.reshape(t.shape)


def _rho0(opts, lo, hi, r):
    spread = float(np.median(np.abs(r - np.median(r)))) * 1.4826
    if not spread > 0:
        spread = float(np.std(r)) or 1.0
    return opts.admm_rho * float(np.mean(hi - lo)) / spread


def _fit_admm(data, design, basis, w, pen, w_sq, idx, lo, hi, fixed_b, free, opts, init):
    n, p = design.n, design.p
    K = len(idx)
    X, y = design.Xs, data.y
    if np.any(free):
        const = design.constant_columns()
        if len(const):
            raise InputError(f"constant column(s) {list(const)} are not identifiable with free offsets")
    pen_std = n * pen.lam * pen.d
    n_free = int(free.sum())
    A = 2.0 * w_sq * design.gram
    B_free = n_free * design.gram_centered if n_free else np.zeros((p, p))
    B_fixed = (K - n_free) * design.gram if K > n_free else np.zeros((p, p))
    gy = 2.0 * w_sq * (X.T @ y)

    if init is not None and init[2] is not None and init[2].shape == (K, n):
        theta = np.array(init[0], dtype=float)
        b = np.array(init[1], dtype=float)
        z = np.array(init[2], dtype=float)
        u = np.array(init[3], dtype=float)
        rho = float(init[4])
    else:
        theta = np.zeros(p) if init is None else np.array(init[0], dtype=float)
        r = y - X @ theta
        b = np.where(free, _init_offsets(basis, idx, r), fixed_b)
        z = r[None, :] - b[:, None]
        u = np.zeros((K, n))
        rho = _rho0(opts, lo, hi, r)
    best_theta, best_b = theta.copy(), b.copy()
    yscale = max(float(np.std(y)), 1e-12)
    cd_tol = _cd_tol(y, n)
    eps = 1e-4
    total = 0
    history = []
    polished = False
    converged = False
    best_obj = np.inf
    last_face = None
    inner_sweeps = 20
    chunk = 50
    lp_tried = False
    lp_after = 0
    while total < opts.max_iter:
        budget = min(chunk, opts.max_iter - total)
        hist = np.zeros(budget + 1)
        bt, bb = best_theta.copy(), best_b.copy()
        status, it, rho, nh = _kernels.admm(
            X, design.mean, y, A, B_free, B_fixed, gy, w_sq, lo, hi, fixed_b, free, pen_std,
            theta, b, z, u, rho, eps * yscale, eps, budget, 10,
            cd_tol, inner_sweeps, True, bt, bb, hist)
        total += it
        improved = False
        for v in hist[:nh]:
            if v < best_obj:
                best_obj = v
                history.append(v)
                improved = True
        if improved:
            best_theta, best_b = bt, bb
        if opts.polish:
            face = (np.sign(theta).tobytes(), np.sign(z).tobytes())
            if face != last_face:
                last_face = face
                out = None
                for th, side in _faces(design, y, theta, b, z, fixed_b, free, w_sq > 0):
                    out = _polish(design, y, w_sq, lo, hi, fixed_b, free, pen_std, th, b, side)
                    if out is not None:
                        break
                if out is not None:
                    obj = _kernels.composite_objective(X, y, out[0], out[1], w_sq, lo, hi,
                                                       fixed_b, free, pen_std)
                    if obj <= best_obj + 1e-12 * max(abs(best_obj), 1.0):
                        polished = converged = True
                        best_theta, best_b = out
                        best_obj = min(obj, best_obj)
                        history.append(best_obj)
                        break
        if opts.polish and w_sq == 0.0 and not lp_tried and (status == 1 or total >= lp_after):
            lp_tried = True
            out = _lp_polish(design, y, lo, hi, fixed_b, free, pen_std, np.nonzero(theta)[0])
            if out is not None:
                obj = _kernels.composite_objective(X, y, out[0], out[1], w_sq, lo, hi,
                                                   fixed_b, free, pen_std)
                if obj <= best_obj + 1e-9 * max(abs(best_obj), 1.0):
                    polished = converged = True
                    best_theta, best_b = out[0], out[1]
                    best_obj = min(obj, best_obj)
                    history.append(best_obj)
                    bb_ = np.where(free, best_b, fixed_b)
                    z = y[None, :] - (X @ best_theta)[None, :] - bb_[:, None]
                    u = out[2] / rho
                    break
        if status == 1:
            if eps <= max(opts.tol, 1e-10) or not opts.polish:
                converged = True
                break
            eps = max(eps * 0.1, 1e-10)
    state = (best_theta.copy(), best_b.copy(), z.copy(), u.copy(), rho)
    return _finish(data, design, basis, w, pen, best_theta, best_b, idx, total, converged,
                   history, polished, state)


def _fit(data, design, basis, w, pen, opts, free_offsets=True, init=None):
    if len(pen) != data.p:
        raise ContractError(f"penalty has {len(pen)} weights for {data.p} coefficients")
    if len(w) != len(basis):
        raise ContractError(f"basis has {len(basis)} components but {len(w)} weights were given")
    if w.mode != "constrained":
        raise ContractError("fit_composite requires constrained (nonnegative) weights; "
                            "use one_step_update for sign-unrestricted weights")
    w_sq, idx, lo, hi, fixed_b, free = _components(basis, w, free_offsets)
    if len(idx) == 0:
        return _fit_squared(data, design, basis, w, pen, w_sq, opts, init)
    return _fit_admm(data, design, basis, w, pen, w_sq, idx, lo, hi, fixed_b, free, opts, init)


def fit_composite(data: Dataset, basis: LossBasis, w, pen: PenaltyVector,
                  opts: SolverOptions | None = None, free_offsets: bool = True,
                  init: FitResult | None = None) -> FitResult:
    """Minimize the weighted-L1 penalized composite objective.

    ``free_offsets=False`` keeps the component offsets of ``basis`` fixed
    instead of optimizing them jointly with ``beta``.  ``init`` warm-starts
    from an earlier fit on the same data.
    """
    opts = opts or SolverOptions()
    w = as_weights(w)
    design = _Design(data.X, opts.standardize)
    return _fit(data, design, basis, w, pen, opts, free_offsets, None if init is None else init._state)


def fit_lasso(data: Dataset, lam: float, opts: SolverOptions | None = None) -> FitResult:
    """``argmin sum_i (y_i - x_i'beta)^2 + n lam sum_j |beta_j|``."""
    if not lam > 0:
        raise ContractError("lambda must be positive")
    return fit_composite(data, LossBasis.squared(), CompositeWeights([1.0]),
                         PenaltyVector.lasso(data.p, lam), opts)


# --------------------------------------------------------------------------
# optimality certificate

def check_kkt(data: Dataset, basis: LossBasis, w, pen: PenaltyVector, fit: FitResult,
              tol: float = 1e-5, kink_tol: float | None = None) -> KktCertificate:
    """Subgradient optimality certificate for a fitted coefficient vector.

    With ``G_j`` the derivative of the loss part in ``beta_j`` (``G = -X' psi_w``),
    the conditions are ``G_j + n lam d_j sgn(beta_j) = 0`` on the active set,
    ``|G_j| <= n lam d_j`` off it and zero derivative in every free offset.
    Residuals within ``kink_tol`` of a kink may use any subgradient in the
    kink's interval; the best admissible choice is found by a small LP.
    ``stationarity_gap`` is the worst equality violation divided by ``n``
    and ``inactive_score`` the largest ``|G_j| / d_j`` over inactive ``j``.
    """
    w = as_weights(w, "unconstrained")
    n, p = data.n, data.p
    if fit.beta.shape != (p,) or fit.residuals.shape != (n,):
        raise ContractError("fit dimensions do not match the data")
    s = np.ones(p) if fit.col_scale is None else fit.col_scale
    d = pen.d * s
    thr = n * pen.lam
    beta = fit.beta
    r = data.y - data.X @ beta
    if kink_tol is None:
        kink_tol = 1e-7 * (1.0 + float(np.max(np.abs(r))))
    active = beta != 0
    inactive_pen = (~active) & (d > 0)
    eq_rows = active | ((~active) & (d == 0))
    n_unpen_inactive = int(np.sum((~active) & (d == 0)))
    target = np.where(active, thr * d * np.sign(beta), 0.0)

    psi = np.zeros(n)
    free_rows, kink_cols, kink_lo, kink_hi, kink_comp = [], [], [], [], []
    offset_fixed = []
    comps = [(k, wk, c) for k, (wk, c) in enumerate(zip(w.w, basis)) if wk != 0.0]
    for m, (k, wk, comp) in enumerate(comps):
        if comp.kind == "squared":
            psi += wk * 2.0 * r
            continue
        t = r - fit.offsets[k]
        sub = wk * (np.sign(t) if comp.kind == "absolute" else comp.tau - (t < 0))
        near = np.abs(t) <= kink_tol
        sub = np.where(near, 0.0, sub)
        psi += sub
        lo, hi = (-wk, wk) if comp.kind == "absolute" else (wk * (comp.tau - 1), wk * comp.tau)
        for i in np.nonzero(near)[0]:
            kink_cols.append(i), kink_lo.append(min(lo, hi)), kink_hi.append(max(lo, hi))
            kink_comp.append(m)
        offset_fixed.append((m, sub.sum()))
    G0 = -(data.X.T @ psi)
    nk = len(kink_cols)
    # derivative in offset k is -(sum of its subgradients)
    off_rows = [(m, s0) for m, s0 in offset_fixed]

    if nk == 0:
        g = np.zeros(0)
    else:
        Xk = data.X[np.array(kink_cols)]            # (nk, p)
        # linear maps from kink subgradients g to G and offset derivatives
        Gmap = -Xk.T                               # (p, nk)
        Omap = np.zeros((len(off_rows), nk))
        for col, m in enumerate(kink_comp):
            for row, (mm, _) in enumerate(off_rows):
                if mm == m:
                    Omap[row, col] = -1.0
        o0 = np.array([-s0 for _, s0 in off_rows])
        # variables (g, t): minimize t
        A_ub, b_ub = [], []
        def add_abs(row, const, bound_t, bound_c):
            A_ub.append(np.concatenate([row, [-bound_t]])); b_ub.append(bound_c - const)
            A_ub.append(np.concatenate([-row, [-bound_t]])); b_ub.append(bound_c + const)
        for j in np.nonzero(eq_rows)[0]:
            add_abs(Gmap[j], G0[j] + target[j], n, 0.0)
        for row in range(len(off_rows)):
            add_abs(Omap[row], o0[row], n, 0.0)
        for j in np.nonzero(inactive_pen)[0]:
            add_abs(Gmap[j], G0[j], n, thr * d[j] * (1 + tol))
        c = np.zeros(nk + 1)
        c[-1] = 1.0
        bounds = list(zip(kink_lo, kink_hi)) + [(0, None)]
        res = linprog(c, A_ub=np.array(A_ub), b_ub=np.array(b_ub), bounds=bounds, method="highs")
        g = res.x[:nk] if res.status == 0 else 0.5 * (np.array(kink_lo) + np.array(kink_hi))
        G0 = G0 + Gmap @ g
        off_vals = o0 + Omap @ g
    if nk == 0:
        off_vals = np.array([-s0 for _, s0 in off_rows])
    eq_viol = np.abs(G0 + target)[eq_rows]
    gap = max(float(eq_viol.max(initial=0.0)), float(np.abs(off_vals).max(initial=0.0)) if len(off_vals) else 0.0) / n
    inact = float(np.max(np.abs(G0[inactive_pen]) / d[inactive_pen], initial=0.0))
    passed = gap <= tol and inact <= thr * (1 + tol)
    return KktCertificate(gap, inact, thr, bool(passed), nk, n_unpen_inactive)


# --------------------------------------------------------------------------
# lambda grids and cross-validation

@dataclass(frozen=True)
class CvMethod:
    """What to fit inside cross-validation.

    ``rule`` supplies the penalty family (its lambda is replaced by each grid
    value); ``beta0`` is the pilot estimate on the standardized scale, needed
    for SCAD/adaptive weights.  ``cv_loss`` is ``"own"`` (held-out composite
    loss) or ``"squared"``.
    """

    basis: LossBasis = field(default_factory=LossBasis.squared)
    weights: CompositeWeights = field(default_factory=lambda: CompositeWeights([1.0]))
    rule: PenaltyRule = field(default_factory=lambda: PenaltyRule("lasso", 1.0))
    beta0: np.ndarray | None = None
    free_offsets: bool = True
    cv_loss: str = "own"

    def penalty(self, lam: float, p: int) -> PenaltyVector:
        if self.rule.kind == "lasso":
            return PenaltyVector.lasso(p, lam)
        if self.beta0 is None:
            raise ContractError(f"{self.rule.kind} penalty needs a pilot estimate")
        return penalty_vector(self.rule.with_lambda(lam), self.beta0)


LASSO = CvMethod()


def _null_scores(y: np.ndarray, basis: LossBasis, w: CompositeWeights, free_offsets: bool) -> np.ndarray:
    """A loss subgradient at ``beta = 0`` that is stationary in every free offset.

    Each free offset sits at a minimizer of its own component loss in ``y``;
    observations on the kink get the subgradient value that makes the
    component's scores sum to zero.
    """
    n = y.size
    psi = np.zeros(n)
    ys = np.sort(y)
    for wk, c in zip(w.w, basis):
        if wk == 0.0:
            continue
        if c.kind == "squared":
            psi += wk * 2.0 * y
            continue
        tau = c.tau if c.kind == "quantile" else 0.5
        scale = 2.0 if c.kind == "absolute" else 1.0
        if free_offsets:
            m = n * tau
            k = int(np.ceil(m - 1e-9))
            # n tau integer: any point of [y_(m), y_(m+1)] minimizes; take the midpoint
            b = 0.5 * (ys[k - 1] + ys[min(k, n - 1)]) if abs(m - round(m)) < 1e-9 else ys[k - 1]
        else:
            b = c.offset
        t = y - b
        g = np.where(t > 0, tau, tau - 1.0)
        on = t == 0
        if free_offsets and np.any(on):
            # fill the kink so that sum g = 0, within [tau - 1, tau]
            need = -g[~on].sum() / on.sum()
            g[on] = min(max(need, tau - 1.0), tau)
        psi += wk * scale * g
    return psi


def lambda_max(data: Dataset, method: CvMethod = LASSO, standardize: bool = True) -> float:
    """A lambda at which the lasso-penalized version of ``method`` has beta = 0.

    Exact for the lasso.  For kinked bases it is the value certified by one
    admissible subgradient choice at ``beta = 0``, so it can only err upward.
    """
    design = _Design(data.X, standardize)
    psi = _null_scores(data.y, method.basis, as_weights(method.weights, "unconstrained"),
                       method.free_offsets)
    lm = float(np.max(np.abs(design.Xs.T @ psi))) / data.n
    return lm if lm > 0 else 1.0


def lambda_grid(lmax: float, n_lambda: int = 30, ratio: float = 1e-3) -> np.ndarray:
    return np.geomspace(lmax, lmax * ratio, n_lambda)


@dataclass
class CvResult:
    lam: float
    lambdas: np.ndarray
    cv_loss: np.ndarray
    cv_se: np.ndarray
    fold_of: np.ndarray


def fold_assignment(n: int, folds: int, seed: int) -> list:
    if folds < 2:
        raise ContractError("need at least two folds")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    if any(len(part) < 2 for part in parts):
        raise InputError(f"{folds} folds over {n} rows leaves a fold with fewer than 2 rows")
    return parts


def _saturated(fit: FitResult, method: CvMethod, n: int) -> bool:
    n_off = sum(c.kind != "squared" for c, wk in zip(method.basis, method.weights.w) if wk != 0)
    return len(fit.active_set) + (n_off if method.free_offsets else 0) >= n


def fit_path(data: Dataset, method: CvMethod, lambdas: Sequence[float],
             opts: SolverOptions | None = None, stop_saturated: bool = True) -> list:
    """Warm-started fits over a lambda sequence (fit in the given order).

    With ``stop_saturated`` the path ends after the first fit whose active
    coefficients plus free offsets reach ``n``; the returned list is then
    shorter than ``lambdas``.
    """
    opts = opts or SolverOptions()
    design = _Design(data.X, opts.standardize)
    w = as_weights(method.weights)
    fits, state = [], None
    for lam in lambdas:
        pen = method.penalty(float(lam), data.p)
        fit = _fit(data, design, method.basis, w, pen, opts, method.free_offsets, state)
        state = fit._state
        fits.append(fit)
        if stop_saturated and _saturated(fit, method, data.n):
            break
    return fits


def heldout_loss(method: CvMethod, fit: FitResult, data: Dataset) -> float:
    r = data.y - data.X @ fit.beta
    if method.cv_loss == "squared":
        return float(np.mean(r * r))
    return float(np.mean(composite_loss(method.basis.with_offsets(fit.offsets),
                                        as_weights(method.weights, "unconstrained"), r)))


def cross_validate(data: Dataset, method: CvMethod, lambdas: Sequence[float], folds: int = 5,
                   seed: int = 0, opts: SolverOptions | None = None) -> CvResult:
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ContractError("lambda grid is empty")
    parts = fold_assignment(data.n, folds, seed)
    fold_of = np.empty(data.n, dtype=int)
    for f, part in enumerate(parts):
        fold_of[part] = f
    if lambdas.size == 1:
        return CvResult(float(lambdas[0]), lambdas, np.full(1, np.nan), np.full(1, np.nan), fold_of)
    order = np.argsort(-lambdas, kind="stable")
    losses = np.empty((folds, lambdas.size))
    for f, part in enumerate(parts):
        train = np.setdiff1d(np.arange(data.n), part)
        dtr, dte = data.subset(rows=train), data.subset(rows=part)
        fits = fit_path(dtr, method, lambdas[order], opts)
        losses[f, :] = np.inf
        for pos, fit in zip(order, fits):
            losses[f, pos] = heldout_loss(method, fit, dte)
    # lambdas beyond a fold's saturation point are unfitted and carry +inf
    mean = losses.mean(axis=0)
    with np.errstate(invalid="ignore"):
        se = losses.std(axis=0, ddof=1) / np.sqrt(folds)
    best = np.min(mean)
    # ties go to the smallest lambda
    ties = np.nonzero(mean <= best)[0]
    lam = float(np.min(lambdas[ties]))
    return CvResult(lam, lambdas, mean, se, fold_of)
