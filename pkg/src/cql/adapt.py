"""Data-driven weights and the two-step adaptive pipeline.

From pilot residuals we estimate ``M_kl = E psi_k psi_l`` and
``a_k = E d psi_k``; the asymptotic variance of the composite estimator is
``w'Mw / (a'w)^2`` and the weights minimizing it are

* constrained:    ``argmin w'Mw  s.t.  w >= 0, a'w = 1`` (keeps the loss convex)
* unconstrained:  ``w ~ M^{-1} a``, used only through the one-step update.

For sign-type scores ``d psi`` has no pointwise meaning; it is replaced by a
Gaussian kernel density estimate, ``E d psi_tau = f(b_tau)`` and
``E d sgn = 2 f(b)``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import nnls
from scipy.stats import norm

from .errors import ContractError, NumericalError
from .losses import CompositeWeights, LossBasis, as_weights, composite_loss
from .penalty import PenaltyRule, PenaltyVector
from .solver import (LASSO, CvMethod, CvResult, Dataset, FitResult, SolverOptions,
                     cross_validate, fit_composite, lambda_grid, lambda_max)

logger = logging.getLogger(__name__)

K_ENUM = 12


@dataclass(frozen=True)
class MomentEstimate:
    M: np.ndarray
    a: np.ndarray
    n_used: int
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bandwidth: float = float("nan")

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        a = np.array(self.a, dtype=float).ravel()
        if M.shape != (a.size, a.size):
            raise ContractError("M must be K x K with K = len(a)")
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(a))):
            raise NumericalError("moment estimates are not finite")
        M = 0.5 * (M + M.T)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a", a)

    @property
    def K(self):
        return self.a.size


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma2_w: float
    cov: np.ndarray
    active_set: np.ndarray


# --------------------------------------------------------------------------
# kernel density pieces

def silverman_bandwidth(r) -> float:
    """``1.06 min(sd, IQR/1.34) n^{-1/5}``; falls back to sd when the IQR is 0."""
    r = np.asarray(r, dtype=float)
    sd = float(np.std(r, ddof=1))
    if not sd > 0:
        raise NumericalError("residuals have zero variance; the density estimate is degenerate")
    q75, q25 = np.percentile(r, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if not spread > 0:
        spread = sd
    return 1.06 * spread * r.size ** (-0.2)


def kde(r, x, h):
    r = np.asarray(r, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return norm.pdf((x[:, None] - r[None, :]) / h).mean(axis=1) / h


def _offsets(basis: LossBasis, r, offsets=None):
    if offsets is not None:
        out = np.asarray(offsets, dtype=float)
        if out.shape != (basis.K,):
            raise ContractError(f"expected {basis.K} offsets")
        return np.where(basis.offset_mask, out, 0.0)
    out = np.zeros(basis.K)
    for k, c in enumerate(basis):
        if c.kind != "squared":
            out[k] = np.quantile(r, c.tau if c.kind == "quantile" else 0.5)
    return out


def psi_matrix(basis: LossBasis, r, offsets) -> np.ndarray:
    """``n x K`` matrix of the fixed subgradient selections ``psi_k(r_i)``."""
    r = np.asarray(r, dtype=float)
    cols = []
    for c, b in zip(basis, offsets):
        if c.kind == "squared":
            cols.append(2.0 * r)
        elif c.kind == "absolute":
            cols.append(np.sign(r - b))
        else:
            cols.append(c.tau - (r - b < 0))
    return np.column_stack(cols)


def dpsi_matrix(basis: LossBasis, r, offsets, h) -> np.ndarray:
    """Pointwise derivative surrogate: 2 for squared, kernel ``k_h(r - b)`` (x2 for absolute)."""
    r = np.asarray(r, dtype=float)
    cols = []
    for c, b in zip(basis, offsets):
        if c.kind == "squared":
            cols.append(np.full(r.size, 2.0))
        else:
            k = norm.pdf((r - b) / h) / h
            cols.append(2.0 * k if c.kind == "absolute" else k)
    return np.column_stack(cols)


def estimate_moments(residuals, basis: LossBasis, offsets=None, bandwidth: float | None = None) -> MomentEstimate:
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 10:
        raise ContractError(f"need at least 10 residuals, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise NumericalError("residuals contain non-finite values")
    h = silverman_bandwidth(r) if bandwidth is None else float(bandwidth)
    b = _offsets(basis, r, offsets)
    P = psi_matrix(basis, r, b)
    M = P.T @ P / r.size
    a = np.empty(basis.K)
    for k, c in enumerate(basis):
        if c.kind == "squared":
            a[k] = 2.0
        else:
            fk = kde(r, b[k], h)[0]
            a[k] = 2.0 * fk if c.kind == "absolute" else fk
    return MomentEstimate(M, a, r.size, b, h)


# --------------------------------------------------------------------------
# weights

def _kkt_ok(M, a, w, tol):
    g = 2.0 * M @ w
    mu = float(w @ g)
    scale = tol * (1.0 + np.abs(g).max() + abs(mu) * np.abs(a).max())
    pos = w > 0
    if np.any(np.abs(g[pos] - mu * a[pos]) > scale):
        return False
    return not np.any(g[~pos] < mu * a[~pos] - scale)


def _support_solve(M, a, S):
    """``argmin w'Mw s.t. a'w = 1`` restricted to support ``S`` (sign-free)."""
    S = list(S)
    s = len(S)
    KKT = np.zeros((s + 1, s + 1))
    KKT[:s, :s] = 2.0 * M[np.ix_(S, S)]
    KKT[:s, s] = -a[S]
    KKT[s, :s] = a[S]
    rhs = np.zeros(s + 1)
    rhs[s] = 1.0
    sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    if not np.allclose(KKT @ sol, rhs, atol=1e-10):
        return None
    w = np.zeros(len(a))
    w[S] = sol[:s]
    return w


def _constrained_enum(M, a, tol=1e-10):
    K = len(a)
    best, best_val = None, np.inf
    for size in range(1, K + 1):
        for S in itertools.combinations(range(K), size):
            if np.all(a[list(S)] <= 0):
                continue
            w = _support_solve(M, a, S)
            if w is None or np.any(w < -1e-12):
                continue
            w = np.maximum(w, 0.0)
            if _kkt_ok(M, a, w, tol):
                return w / (a @ w)
            val = w @ M @ w
            if val < best_val:
                best, best_val = w, val
    if best is None:
        raise NumericalError("no feasible support found for the weight QP")
    logger.warning("weight QP: no support met the KKT check; returning best feasible support")
    return best / (a @ best)


def _constrained_nnls(M, a, tol=1e-10):
    """Homogeneous reformulation: ``min_{v >= 0} |L'v - L^{-1}a|^2`` then ``w = v / a'v``."""
    K = len(a)
    eps = 1e-12 * np.trace(M) / K
    L = np.linalg.cholesky(M + eps * np.eye(K))
    v, _ = nnls(L.T, solve_triangular(L, a, lower=True))
    if not a @ v > 0:
        raise NumericalError("weight QP reformulation returned a degenerate point")
    w = v / (a @ v)
    # exact re-solve on the identified support
    S = tuple(np.nonzero(w > 0)[0])
    w2 = _support_solve(M, a, S)
    if w2 is not None and np.all(w2 >= -1e-12):
        w2 = np.maximum(w2, 0.0)
        w2 /= a @ w2
        if _kkt_ok(M, a, w2, tol):
            return w2
    return w


def optimal_weights(m: MomentEstimate, mode: str = "constrained", k_enum: int = K_ENUM) -> CompositeWeights:
    """Variance-minimizing weights, normalized so that ``a'w = 1``."""
    M, a = m.M, m.a
    K = m.K
    if mode == "constrained":
        if not np.any(a > 0):
            raise NumericalError("constrained weights infeasible: no component has a_k > 0")
        w = _constrained_enum(M, a) if K <= k_enum else _constrained_nnls(M, a)
        return CompositeWeights(w, "constrained")
    if mode != "unconstrained":
        raise ContractError(f"unknown weight mode {mode!r}")
    eps = 1e-10 * np.trace(M) / K
    flagged = np.linalg.cond(M) > 1e12
    w = np.linalg.solve(M + eps * np.eye(K), a)
    s = a @ w
    if not s > 0 or not np.all(np.isfinite(w)):
        raise NumericalError("unconstrained weight system is degenerate")
    if flagged:
        logger.warning("M is numerically singular (cond > 1e12); weights are ridge-regularized")
    return CompositeWeights(w / s, "unconstrained", bool(flagged))


def equal_weights(m: MomentEstimate) -> CompositeWeights:
    """Equal weights rescaled to ``a'w = 1`` (the ECQR feasible point)."""
    w = np.ones(m.K)
    return CompositeWeights(w / (m.a @ w), "constrained")


def asymptotic_variance(m: MomentEstimate, w) -> float:
    w = as_weights(w, "unconstrained").w
    return float(w @ m.M @ w / (m.a @ w) ** 2)


# --------------------------------------------------------------------------
# pipeline

@dataclass
class TwoStepResult:
    fit: FitResult
    weights: CompositeWeights
    moments: MomentEstimate
    initial: FitResult
    lam: float
    lasso_lam: float
    cv: CvResult | None = None
    lasso_cv: CvResult | None = None


def two_step_fit(data: Dataset, basis: LossBasis, rule: PenaltyRule | None = None,
                 lam: float | None = None, opts: SolverOptions | None = None, *,
                 weights=None, lasso_lam: float | None = None, n_lambda: int = 30,
                 folds: int = 5, seed: int = 0, cv_loss: str = "own",
                 free_offsets: bool = True, lambdas=None) -> TwoStepResult:
    """LASSO pilot, moment estimates, constrained weights, penalized composite refit.

    ``lam=None`` / ``lasso_lam=None`` select the tuning parameters by
    ``folds``-fold cross-validation on a log grid from lambda_max down to
    1e-3 lambda_max, or on ``lambdas`` when given (used by both stages).
    ``weights`` overrides the data-driven weights (e.g.
    equal weights).  The pilot estimate only enters through the penalty
    weights, so coordinates can enter or leave the model in the refit.
    """
    opts = opts or SolverOptions()
    rule = rule or PenaltyRule("scad", 1.0)
    lasso_cv = None
    if lasso_lam is None:
        grid = lambdas if lambdas is not None else \
            lambda_grid(lambda_max(data, LASSO, opts.standardize), n_lambda)
        lasso_cv = cross_validate(data, LASSO, grid, folds, seed, opts)
        lasso_lam = lasso_cv.lam
    pilot = fit_composite(data, LossBasis.squared(), CompositeWeights([1.0]),
                          PenaltyVector.lasso(data.p, lasso_lam), opts)
    moments = estimate_moments(pilot.residuals, basis)
    w = optimal_weights(moments, "constrained") if weights is None else as_weights(weights)
    theta0 = pilot.beta * pilot.col_scale
    method = CvMethod(basis=basis, weights=w, rule=rule, beta0=theta0,
                      free_offsets=free_offsets, cv_loss=cv_loss)
    cv = None
    if lam is None:
        grid = lambdas if lambdas is not None else \
            lambda_grid(lambda_max(data, method, opts.standardize), n_lambda)
        cv = cross_validate(data, method, grid, folds, seed, opts)
        lam = cv.lam
    pen = method.penalty(lam, data.p)
    fit = fit_composite(data, basis, w, pen, opts, free_offsets)
    return TwoStepResult(fit, w, moments, pilot, float(lam), float(lasso_lam), cv, lasso_cv)


def _newton_pieces(data, basis, w, beta, offsets, active, h):
    S = data.X[:, active]
    r = data.y - S @ beta[active]
    P = psi_matrix(basis, r, offsets)
    D = dpsi_matrix(basis, r, offsets, h)
    return S, r, P, D


def one_step_update(data: Dataset, basis: LossBasis, w, fit: FitResult,
                    bandwidth: float | None = None) -> FitResult:
    """One Newton step on the active set, any-sign weights allowed.

    The coefficients on the active set and the offsets of the weighted
    non-squared components are updated jointly,
    ``(beta, b) <- (beta, b) - Omega^{-1} G`` with ``G`` the gradient of
    ``sum_i rho_w`` and ``Omega`` its Hessian with the kernel surrogate for
    ``d psi``.  Inactive coefficients stay at zero.
    """
    w = as_weights(w, "unconstrained")
    if len(w) != basis.K:
        raise ContractError(f"basis has {basis.K} components but {len(w)} weights were given")
    active = np.asarray(fit.active_set, dtype=int)
    if active.size == 0:
        raise ContractError("one-step update needs a nonempty active set")
    offsets = np.where(basis.offset_mask, fit.offsets, 0.0)
    r0 = data.y - data.X @ fit.beta
    h = silverman_bandwidth(r0) if bandwidth is None else float(bandwidth)
    S, r, P, D = _newton_pieces(data, basis, w, fit.beta, offsets, active, h)
    s = active.size
    F = [k for k, c in enumerate(basis) if c.kind != "squared" and w.w[k] != 0.0]
    psi_w = P @ w.w
    dpsi_w = D @ w.w
    grad = np.concatenate([-(S.T @ psi_w), [-w.w[k] * P[:, k].sum() for k in F]])
    dim = s + len(F)
    Om = np.zeros((dim, dim))
    Om[:s, :s] = (S * dpsi_w[:, None]).T @ S
    for m, k in enumerate(F):
        col = w.w[k] * (S.T @ D[:, k])
        Om[:s, s + m] = Om[s + m, :s] = col
        Om[s + m, s + m] = w.w[k] * D[:, k].sum()
    if np.linalg.cond(Om) > 1e12 or not np.all(np.isfinite(Om)):
        raise NumericalError(f"one-step Hessian is singular (active set size {s}, n = {data.n})")
    step = np.linalg.solve(Om, grad)
    beta = np.zeros(data.p)
    beta[active] = fit.beta[active] - step[:s]
    new_off = offsets.copy()
    for m, k in enumerate(F):
        new_off[k] -= step[s + m]
    res = data.y - data.X @ beta
    obj = float(np.sum(composite_loss(basis.with_offsets(new_off), w, res)))
    return FitResult(beta=beta, offsets=new_off, residuals=res, active_set=np.nonzero(beta)[0],
                     objective=obj, iterations=1, converged=True, col_scale=fit.col_scale,
                     lam=fit.lam)


def covariance_estimate(data: Dataset, basis: LossBasis, w, fit: FitResult,
                        bandwidth: float | None = None) -> CovarianceEstimate:
    """``sigma2_w = w'Mw / (a'w)^2`` at the fit's residuals and offsets; ``cov = sigma2_w (S'S)^{-1}``."""
    w = as_weights(w, "unconstrained")
    active = np.asarray(fit.active_set, dtype=int)
    if active.size == 0:
        raise ContractError("covariance needs a nonempty active set")
    r = data.y - data.X @ fit.beta
    off = np.where(basis.offset_mask, fit.offsets, 0.0) if len(fit.offsets) == basis.K else None
    m = estimate_moments(r, basis, off, bandwidth)
    sigma2 = asymptotic_variance(m, w)
    S = data.X[:, active]
    G = S.T @ S
    if np.linalg.cond(G) > 1e12:
        raise NumericalError(f"S'S is singular on the active set of size {active.size}")
    cov = sigma2 * np.linalg.inv(G)
    cov = 0.5 * (cov + cov.T)
    return CovarianceEstimate(sigma2, cov, active)
