"""Population asymptotic variances and relative efficiencies.

For a composite score ``psi_w = sum_k w_k psi_k`` the asymptotic variance of
the slope estimator (per unit design) is

    sigma2_w = E[psi_w(eps)^2] / (E[d psi_w(eps)])^2

and its efficiency relative to the MLE is ``(1 / I(f)) / sigma2_w``.
Population offsets sit at ``F^{-1}(tau_k)`` (quantile) or the median
(absolute), so products of indicator scores reduce to CDF values and only the
partial moments ``E[eps 1{eps < b}]`` need quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .adapt import MomentEstimate, optimal_weights
from .distributions import CATALOG, ErrorDistribution, fisher_information, get_distribution
from .errors import ContractError, NumericalError
from .losses import CompositeWeights, LossBasis, as_weights, quantile_grid

AB_TOL = 1e-12
METHODS = ("L1", "L2", "L1-L2+", "L1-L2", "ECQR", "WCQR+", "WCQR")
K_METHODS = ("ECQR", "WCQR+", "WCQR")


@dataclass(frozen=True)
class L1L2Constants:
    a_eps: float
    b_eps: float
    B: float
    c: float = float("nan")
    d_eps: float = float("nan")
    sigma2: float = float("nan")


def population_moments(dist: ErrorDistribution, basis: LossBasis) -> MomentEstimate:
    """Exact ``M = E psi psi'`` and ``a = E d psi`` at the population offsets."""
    K = basis.K
    b = np.zeros(K)
    for k, c in enumerate(basis):
        if c.kind == "quantile":
            b[k] = dist.ppf(c.tau)
        elif c.kind == "absolute":
            b[k] = dist.median
    # sgn(t) = 2 (1/2 - 1{t < 0}), so absolute components are scaled level-1/2 quantile scores
    lev = np.array([c.tau if c.kind == "quantile" else 0.5 for c in basis])
    scale = np.array([2.0 if c.kind == "absolute" else 1.0 for c in basis])
    Fb = np.array([dist.cdf(bk) if c.kind != "squared" else np.nan for c, bk in zip(basis, b)])
    sigma2 = dist.variance
    M = np.zeros((K, K))
    for k, ck in enumerate(basis):
        for l, cl in enumerate(basis):
            if l < k:
                continue
            if ck.kind == "squared" and cl.kind == "squared":
                v = 4.0 * sigma2
            elif ck.kind == "squared" or cl.kind == "squared":
                j = l if ck.kind == "squared" else k
                # E[2 eps (tau - 1{eps < b})] = -2 E[eps 1{eps < b}]
                v = -2.0 * scale[j] * dist.partial_mean(b[j])
            else:
                # E[(tau_k - 1{eps<b_k}) (tau_l - 1{eps<b_l})]
                joint = min(Fb[k], Fb[l]) if b[k] != b[l] else Fb[k]
                v = scale[k] * scale[l] * (lev[k] * lev[l] - lev[k] * Fb[l] - lev[l] * Fb[k] + joint)
            M[k, l] = M[l, k] = v
    a = np.array([2.0 if c.kind == "squared" else scale[k] * float(dist.pdf(b[k]))
                  for k, c in enumerate(basis)])
    return MomentEstimate(M, a, 0, b)


def sigma2_composite(dist, basis: LossBasis, w) -> float:
    dist = get_distribution(dist)
    w = as_weights(w, "unconstrained").w
    if len(w) != basis.K:
        raise ContractError(f"basis has {basis.K} components but {len(w)} weights were given")
    m = population_moments(dist, basis)
    den = float(m.a @ w)
    if abs(den) <= 1e-12 * (np.abs(m.a) @ np.abs(w)):
        raise NumericalError("zero denominator: weights and distribution give no curvature")
    return float(w @ m.M @ w) / den ** 2


def l1l2_constants(dist) -> L1L2Constants:
    dist = get_distribution(dist)
    var = dist.variance
    if not np.isfinite(var):
        raise NumericalError("L1-L2 constants need a finite variance")
    sd = np.sqrt(var)
    b0 = dist.median
    # B = E[eps sgn(eps - b0)] = E eps - 2 E[eps 1{eps < b0}] = -2 E[eps 1{eps < b0}]
    B = -2.0 * dist.partial_mean(b0)
    return L1L2Constants(a_eps=B / sd, b_eps=sd * float(dist.pdf(b0)), B=B)


def l1l2_g(c, a, b):
    """Variance ratio ``sigma2_L1L2 / sigma2`` at mixing ratio ``w1/w2 = c sigma``."""
    c = np.asarray(c, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(np.isinf(c), 1.0 / (4.0 * b * b),
                       (c * c / 4.0 + 1.0 + a * c) / (b * c + 1.0) ** 2)
    return out[()] if out.ndim == 0 else out


def l1l2_optimal(dist, mode: str = "constrained") -> L1L2Constants:
    """Optimal L1/L2 mixing.

    Constrained (``c >= 0``): ``c = 2 (2b - a)_+ / (1 - 2ab)`` if ``ab < 1/2``;
    at ``ab = 1/2`` the minimizer is 0 when ``2b <= a``; otherwise
    ``c = inf`` (L1 alone).  Unconstrained: ``c_opt = 2 (2b - a)/(1 - 2ab)``
    with ``d = (1 - a^2)/(4b^2 - 4ab + 1)``.
    """
    dist = get_distribution(dist)
    k = l1l2_constants(dist)
    a, b = k.a_eps, k.b_eps
    ab = a * b
    var = dist.variance
    if mode == "constrained":
        if ab < 0.5 - AB_TOL:
            c = 2.0 * max(2.0 * b - a, 0.0) / (1.0 - 2.0 * ab)
        elif abs(ab - 0.5) <= AB_TOL and 2.0 * b <= a:
            c = 0.0
        else:
            c = np.inf
        g = float(l1l2_g(c, a, b))
        return L1L2Constants(a, b, k.B, float(c), g, var * g)
    if mode != "unconstrained":
        raise ContractError(f"unknown mode {mode!r}")
    if abs(ab - 0.5) <= AB_TOL:
        # g is then minimized at infinity or at 0; fall back to the constrained answer
        return l1l2_optimal(dist, "constrained")
    c = 2.0 * (2.0 * b - a) / (1.0 - 2.0 * ab)
    d = (1.0 - a * a) / (4.0 * b * b - 4.0 * a * b + 1.0)
    return L1L2Constants(a, b, k.B, float(c), float(d), var * d)


def cqr_numerator(taus) -> np.ndarray:
    t = np.asarray(taus, dtype=float)
    if np.any(np.diff(t) <= 0) or np.any((t <= 0) | (t >= 1)):
        raise ContractError("taus must be strictly increasing in (0, 1)")
    return np.minimum.outer(t, t) - np.outer(t, t)


def cqr_density(dist, taus) -> np.ndarray:
    dist = get_distribution(dist)
    return np.asarray(dist.pdf(dist.ppf(np.asarray(taus, dtype=float))), dtype=float)


def cqr_sigma2(dist, taus, w) -> float:
    M = cqr_numerator(taus)
    a = cqr_density(dist, taus)
    w = as_weights(w, "unconstrained").w
    den = float(a @ w)
    if abs(den) <= 1e-12 * (np.abs(a) @ np.abs(w)):
        raise NumericalError("zero denominator in the CQR variance")
    return float(w @ M @ w) / den ** 2


def cqr_optimal_weights(dist, taus, mode: str = "constrained") -> CompositeWeights:
    m = MomentEstimate(cqr_numerator(taus), cqr_density(dist, taus), 0)
    return optimal_weights(m, mode)


def method_sigma2(dist, method: str, K: int | None = None) -> float:
    dist = get_distribution(dist)
    if method == "L1":
        return 1.0 / (4.0 * float(dist.pdf(dist.median)) ** 2)
    if method == "L2":
        return dist.variance
    if method == "L1-L2+":
        return l1l2_optimal(dist, "constrained").sigma2
    if method == "L1-L2":
        return l1l2_optimal(dist, "unconstrained").sigma2
    if method not in K_METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    if K is None:
        raise ContractError(f"{method} needs K")
    taus = quantile_grid(K)
    if method == "ECQR":
        return cqr_sigma2(dist, taus, np.ones(K))
    if method == "WCQR+":
        return cqr_sigma2(dist, taus, cqr_optimal_weights(dist, taus, "constrained"))
    M, a = cqr_numerator(taus), cqr_density(dist, taus)
    return float(1.0 / (a @ np.linalg.solve(M, a)))


def relative_efficiency(dist, method: str, K: int | None = None) -> float:
    dist = get_distribution(dist)
    return (1.0 / fisher_information(dist)) / method_sigma2(dist, method, K)


def efficiency_table(dists: Iterable = CATALOG, methods: Sequence[str] = METHODS,
                     K_list: Sequence[int] = (3, 5, 9, 19, 29)) -> list:
    """Rows ``{dist, method, K, sigma2, efficiency}``; K is ``None`` for the L-methods."""
    rows = []
    for d in dists:
        dist = get_distribution(d)
        info = fisher_information(dist)
        for meth in methods:
            for K in (K_list if meth in K_METHODS else (None,)):
                s2 = method_sigma2(dist, meth, K)
                rows.append({"dist": dist.kind, "method": meth, "K": K, "sigma2": s2,
                             "efficiency": (1.0 / info) / s2})
    return rows


def weight_table(dists: Iterable = CATALOG, K: int = 9, mode: str = "constrained") -> list:
    """Population optimal CQR weights, normalized to sum to one."""
    rows = []
    taus = quantile_grid(K)
    for d in dists:
        dist = get_distribution(d)
        w = cqr_optimal_weights(dist, taus, mode).w
        w = w / w.sum()
        for t, wk in zip(taus, w):
            rows.append({"dist": dist.kind, "tau": float(t), "weight": float(wk)})
    return rows
