"""Monte Carlo harness for sparse recovery with composite losses.

Each replication draws ``x ~ N(0, Sigma)`` with ``Sigma_ij = rho^|i-j|``,
errors from the catalog and ``y = X beta* + eps``, then runs the requested
methods (and their true-support "oracle" versions).  Every replication owns
an RNG stream derived from ``(seed, rep)``, so results do not depend on the
order or the number of workers.
"""
from __future__ import annotations

import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing as mp

import numpy as np
from threadpoolctl import threadpool_limits

from .adapt import (covariance_estimate, equal_weights, estimate_moments, one_step_update,
                    optimal_weights, two_step_fit)
from .distributions import ErrorDistribution, get_distribution
from .errors import ContractError, InputError, NumericalError
from .losses import CompositeWeights, LossBasis
from .penalty import PenaltyRule, PenaltyVector
from .solver import (LASSO, Dataset, FitResult, SolverOptions, cross_validate, fit_composite,
                     lambda_grid, lambda_max)

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-8
FAMILIES = ("lasso", "l1", "l2", "l1l2+", "l1l2", "ecqr", "wcqr+", "wcqr")
DEFAULT_K = 9


@dataclass(frozen=True)
class MethodSpec:
    name: str
    family: str
    K: int = 0

    @property
    def basis(self) -> LossBasis:
        if self.family in ("lasso", "l2"):
            return LossBasis.squared()
        if self.family == "l1":
            return LossBasis.absolute()
        if self.family in ("l1l2+", "l1l2"):
            return LossBasis.l1l2()
        return LossBasis.cqr(self.K)

    @property
    def one_step(self) -> bool:
        # sign-unrestricted weights only enter through the one-step update
        return self.family in ("l1l2", "wcqr")


def parse_method(desc: str) -> MethodSpec:
    """``lasso | l1 | l2 | l1l2+ | l1l2 | ecqr(K) | wcqr+(K) | wcqr(K)``; K defaults to 9."""
    s = str(desc).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
    s = s.replace("plus", "+")
    m = re.fullmatch(r"(lasso|l1l2\+?|l1|l2|ecqr|wcqr\+?)(?:\(?(\d+)\)?)?", s)
    if m is None:
        raise InputError(f"unknown method {desc!r}; expected one of lasso, l1, l2, l1l2+, l1l2, "
                         "ecqr(K), wcqr+(K), wcqr(K)")
    fam, k = m.group(1), m.group(2)
    if fam in ("ecqr", "wcqr", "wcqr+"):
        K = DEFAULT_K if k is None else int(k)
        if K < 1:
            raise InputError(f"method {desc!r}: K must be at least 1")
        return MethodSpec(f"{fam}{K}", fam, K)
    if k is not None:
        raise InputError(f"method {desc!r} takes no K")
    return MethodSpec(fam, fam)


@dataclass(frozen=True)
class Scenario:
    """Simulation design.  ``beta_star`` holds 1-based ``(index, value)`` pairs."""

    n: int
    p: int
    beta_star: tuple
    dist: ErrorDistribution = field(default_factory=lambda: ErrorDistribution("normal"))
    methods: tuple = ("wcqr+",)
    rho: float = 0.5
    reps: int = 100
    cv_folds: int = 5
    lambda_grid: tuple | None = None
    seed: int = 0
    n_lambda: int = 30
    cv_loss: str = "own"
    oracle: bool = True

    def __post_init__(self):
        if int(self.n) < 4 or int(self.p) < 1:
            raise InputError("need n >= 4 and p >= 1")
        pairs = []
        for item in self.beta_star:
            try:
                j, v = item
            except (TypeError, ValueError):
                raise InputError(f"beta_star entries must be [index, value] pairs, got {item!r}")
            if int(j) != j or not 1 <= int(j) <= int(self.p):
                raise InputError(f"beta_star index {j} out of range 1..{self.p}")
            pairs.append((int(j), float(v)))
        if len({j for j, _ in pairs}) != len(pairs):
            raise InputError("beta_star has repeated indices")
        if not 0.0 <= float(self.rho) < 1.0:
            raise InputError(f"rho must lie in [0, 1), got {self.rho}")
        if int(self.reps) < 1:
            raise InputError("reps must be at least 1")
        if int(self.cv_folds) < 2:
            raise InputError("cv_folds must be at least 2")
        if self.cv_loss not in ("own", "squared"):
            raise InputError(f"cv_loss must be 'own' or 'squared', got {self.cv_loss!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")
        methods = tuple(parse_method(m).name for m in (self.methods or ()))
        if not methods:
            raise InputError("no methods requested")
        grid = None
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if not grid or any(not v > 0 for v in grid):
                raise InputError("lambda_grid values must be positive")
        for name, v in (("n", self.n), ("p", self.p), ("reps", self.reps),
                        ("cv_folds", self.cv_folds), ("seed", self.seed)):
            object.__setattr__(self, name, int(v))
        object.__setattr__(self, "beta_star", tuple(pairs))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "dist", get_distribution(self.dist))
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "lambda_grid", grid)

    @property
    def beta(self) -> np.ndarray:
        b = np.zeros(self.p)
        for j, v in self.beta_star:
            b[j - 1] = v
        return b

    @property
    def support(self) -> np.ndarray:
        return np.nonzero(self.beta)[0]


# --------------------------------------------------------------------------
# data and metrics

def _streams(sc: Scenario, rep: int):
    data_ss, cv_ss = np.random.SeedSequence([sc.seed, int(rep)]).spawn(2)
    return np.random.default_rng(data_ss), int(cv_ss.generate_state(1, np.uint32)[0])


def generate_data(sc: Scenario, rep: int):
    """``(Dataset, beta_star)`` for replication ``rep``."""
    rng, _ = _streams(sc, rep)
    Z = rng.standard_normal((sc.n, sc.p))
    X = np.empty_like(Z)
    X[:, 0] = Z[:, 0]
    c = np.sqrt(1.0 - sc.rho ** 2)
    for j in range(1, sc.p):
        X[:, j] = sc.rho * X[:, j - 1] + c * Z[:, j]
    eps = sc.dist.sample(rng, sc.n)
    beta = sc.beta
    return Dataset(X, X @ beta + eps), beta


def ar_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def model_error(beta_hat, beta_star, rho: float) -> float:
    """``(b - b*)' Sigma (b - b*)`` with the population AR covariance."""
    bh = np.asarray(beta_hat, dtype=float).ravel()
    bs = np.asarray(beta_star, dtype=float).ravel()
    if bh.shape != bs.shape:
        raise ContractError(f"beta_hat has length {bh.size} but beta_star has length {bs.size}")
    d = bh - bs
    return float(d @ ar_covariance(d.size, rho) @ d)


def count_tp_fp(beta_hat, beta_star, zero_tol: float = ZERO_TOL):
    if zero_tol < 0:
        raise ContractError("zero_tol must be nonnegative")
    bh = np.asarray(beta_hat, dtype=float).ravel()
    bs = np.asarray(beta_star, dtype=float).ravel()
    if bh.shape != bs.shape:
        raise ContractError(f"beta_hat has length {bh.size} but beta_star has length {bs.size}")
    nz = np.abs(bh) > zero_tol
    truth = bs != 0
    return int(np.sum(nz & truth)), int(np.sum(nz & ~truth))


def screen_marginal(data: Dataset, keep: int) -> np.ndarray:
    """Columns with the largest univariate-regression F statistics, descending.

    ``F_j = (n - 2) R_j^2 / (1 - R_j^2)``; a perfect fit counts as +inf and a
    constant column as 0.  Ties keep the lower index first.
    """
    return np.argsort(-marginal_f(data), kind="stable")[:_check_keep(keep, data.p)]


def _check_keep(keep, p):
    if int(keep) != keep or not 1 <= int(keep) <= p:
        raise ContractError(f"keep must be an integer in 1..{p}, got {keep}")
    return int(keep)


def marginal_f(data: Dataset) -> np.ndarray:
    X = data.X - data.X.mean(axis=0)
    y = data.y - data.y.mean()
    sxx = np.sum(X * X, axis=0)
    syy = float(y @ y)
    sxy = X.T @ y
    F = np.zeros(data.p)
    scale = np.sum(data.X * data.X, axis=0)
    ok = sxx > 1e-13 * np.maximum(scale, 1e-300)
    if syy <= 0 or data.n <= 2:
        return F
    r2 = np.clip(sxy[ok] ** 2 / (sxx[ok] * syy), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        F[ok] = np.where(1.0 - r2 <= 1e-14, np.inf, (data.n - 2) * r2 / (1.0 - r2))
    return F


# --------------------------------------------------------------------------
# one replication

@dataclass
class MethodOutcome:
    method: str
    model_error: float = float("nan")
    tp: int = 0
    fp: int = 0
    sigma_hat_w: float = float("nan")
    converged: bool = False
    sign_consistent: bool = False
    oracle_model_error: float = float("nan")
    oracle_sigma_hat_w: float = float("nan")
    beta: np.ndarray | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class RepSummary:
    rep: int
    seed: tuple
    outcomes: dict


def _sigma_hat(data, basis, w, fit):
    if fit.active_set.size == 0:
        return float("nan")
    try:
        return float(np.sqrt(covariance_estimate(data, basis, w, fit).sigma2_w))
    except (NumericalError, ContractError):
        return float("nan")


def _reweight_one_step(data, basis, fit):
    """Unconstrained weights from the refit residuals, then the one-step correction."""
    off = np.where(basis.offset_mask, fit.offsets, 0.0)
    m = estimate_moments(data.y - data.X @ fit.beta, basis, off)
    w = optimal_weights(m, "unconstrained")
    return one_step_update(data, basis, w, fit), w


def _fit_method(spec: MethodSpec, data: Dataset, sc: Scenario, cv_seed: int, lasso_lam, opts):
    """Penalized fit: ``(beta, sigma_hat_w, converged)``."""
    basis = spec.basis
    if spec.family == "lasso":
        fit = fit_composite(data, basis, CompositeWeights([1.0]),
                            PenaltyVector.lasso(data.p, lasso_lam), opts)
        return fit.beta, _sigma_hat(data, basis, [1.0], fit), fit.converged
    weights = np.ones(basis.K) if spec.family == "ecqr" else None
    res = two_step_fit(data, basis, PenaltyRule("scad", 1.0), None, opts, weights=weights,
                       lasso_lam=lasso_lam, n_lambda=sc.n_lambda, folds=sc.cv_folds,
                       seed=cv_seed, cv_loss=sc.cv_loss, lambdas=sc.lambda_grid)
    fit, w = res.fit, res.weights
    if spec.one_step and fit.active_set.size > 0:
        fit, w = _reweight_one_step(data, basis, fit)
    return fit.beta, _sigma_hat(data, basis, w, fit), fit.converged


def _fit_oracle(spec: MethodSpec, data: Dataset, support, opts):
    """Unpenalized fit on the true support, weights from least-squares residuals there."""
    p = data.p
    sub = data.subset(cols=support)
    basis = spec.basis
    ols = fit_composite(sub, LossBasis.squared(), CompositeWeights([1.0]),
                        PenaltyVector.none(sub.p), opts)
    if spec.family in ("lasso", "l2"):
        fit, w = ols, CompositeWeights([1.0])
    else:
        m = estimate_moments(ols.residuals, basis)
        w = equal_weights(m) if spec.family == "ecqr" else optimal_weights(m, "constrained")
        fit = fit_composite(sub, basis, w, PenaltyVector.none(sub.p), opts)
        if spec.one_step:
            fit, w = _reweight_one_step(sub, basis, fit)
    beta = np.zeros(p)
    beta[support] = fit.beta
    return beta, _sigma_hat(sub, basis, w, fit)


def run_rep(sc: Scenario, rep: int, opts: SolverOptions | None = None) -> RepSummary:
    opts = opts or SolverOptions()
    data, beta_star = generate_data(sc, rep)
    _, cv_seed = _streams(sc, rep)
    support = np.nonzero(beta_star)[0]
    lasso_lam, lasso_err = None, None
    try:
        grid = sc.lambda_grid if sc.lambda_grid is not None else \
            lambda_grid(lambda_max(data, LASSO, opts.standardize), sc.n_lambda)
        lasso_lam = cross_validate(data, LASSO, grid, sc.cv_folds, cv_seed, opts).lam
    except (NumericalError, ContractError, InputError) as e:
        lasso_err = f"lasso pilot: {e}"
    outcomes = {}
    for name in sc.methods:
        spec = parse_method(name)
        out = MethodOutcome(spec.name)
        if lasso_err is not None:
            out.error = lasso_err
            outcomes[spec.name] = out
            continue
        try:
            beta, sig, conv = _fit_method(spec, data, sc, cv_seed, lasso_lam, opts)
            out.beta = beta
            out.model_error = model_error(beta, beta_star, sc.rho)
            out.tp, out.fp = count_tp_fp(beta, beta_star)
            out.sigma_hat_w = sig
            out.converged = bool(conv)
            out.sign_consistent = bool(np.all(np.sign(beta[support]) == np.sign(beta_star[support])))
            if sc.oracle and support.size > 0:
                ob, osig = _fit_oracle(spec, data, support, opts)
                out.oracle_model_error = model_error(ob, beta_star, sc.rho)
                out.oracle_sigma_hat_w = osig
        except (NumericalError, ContractError, InputError, np.linalg.LinAlgError) as e:
            logger.warning("rep %d, %s failed: %s", rep, spec.name, e)
            out.error = f"{type(e).__name__}: {e}"
        outcomes[spec.name] = out
    return RepSummary(rep, (sc.seed, rep), outcomes)


# --------------------------------------------------------------------------
# orchestration

@dataclass
class MethodSummary:
    method: str
    mme: float
    oracle_mme: float
    mean_tp: float
    mean_fp: float
    mean_sigma_hat_w: float
    mc_sd_sigma_hat_w: float
    sign_consistency: float
    n_ok: int
    n_failed: int


@dataclass
class ScenarioResult:
    scenario: Scenario
    summaries: dict
    reps: list

    def table_rows(self) -> list:
        return [dict(vars(s)) for s in self.summaries.values()]

    def per_rep_rows(self) -> list:
        return [{"rep": r.rep, "method": name, "model_error": o.model_error}
                for r in self.reps for name, o in r.outcomes.items()]


SUMMARY_COLUMNS = ["method", "mme", "oracle_mme", "mean_tp", "mean_fp", "mean_sigma_hat_w",
                   "mc_sd_sigma_hat_w", "sign_consistency", "n_ok", "n_failed"]
PER_REP_COLUMNS = ["rep", "method", "model_error"]


def _nanmean(v):
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


def _nansd(v):
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.std(ddof=1)) if v.size > 1 else float("nan")


def summarize(sc: Scenario, reps: list) -> dict:
    out = {}
    for name in sc.methods:
        got = [r.outcomes[name] for r in reps]
        ok = [o for o in got if not o.failed]
        med = lambda v: float(np.median(v)) if len(v) else float("nan")
        out[name] = MethodSummary(
            method=name,
            mme=med([o.model_error for o in ok]),
            oracle_mme=med([o.oracle_model_error for o in ok if np.isfinite(o.oracle_model_error)]),
            mean_tp=float(np.mean([o.tp for o in ok])) if ok else float("nan"),
            mean_fp=float(np.mean([o.fp for o in ok])) if ok else float("nan"),
            mean_sigma_hat_w=_nanmean([o.sigma_hat_w for o in ok]),
            mc_sd_sigma_hat_w=_nansd([o.sigma_hat_w for o in ok]),
            sign_consistency=float(np.mean([o.sign_consistent for o in ok])) if ok else float("nan"),
            n_ok=len(ok), n_failed=len(got) - len(ok))
    return out


def n_workers() -> int:
    raw = os.environ.get("CQL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"CQL_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise InputError(f"CQL_THREADS must be a positive integer, got {raw!r}")
    return n


def _worker(args):
    sc, rep, opts = args
    # single-threaded BLAS keeps every rep bit-reproducible
    with threadpool_limits(1):
        return run_rep(sc, rep, opts)


def run_scenario(sc: Scenario, opts: SolverOptions | None = None, workers: int | None = None) -> ScenarioResult:
    """Run all replications (``CQL_THREADS`` processes by default) and aggregate."""
    workers = n_workers() if workers is None else int(workers)
    jobs = [(sc, rep, opts) for rep in range(sc.reps)]
    if workers <= 1 or sc.reps == 1:
        reps = [_worker(j) for j in jobs]
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(max_workers=min(workers, sc.reps), mp_context=ctx) as ex:
            reps = list(ex.map(_worker, jobs))
    reps.sort(key=lambda r: r.rep)
    return ScenarioResult(sc, summarize(sc, reps), reps)
