"""Per-coefficient weights for the weighted-L1 penalty ``n lambda sum_j d_j |beta_j|``.

The weights come from a pilot estimate through ``d_j = gamma(|beta0_j|) / lambda``
where ``gamma`` is the derivative of the target penalty (local linear
approximation).  Three rules are supported: plain LASSO, SCAD and the
adaptive LASSO.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

SCAD_A = 3.7
D_MAX = 1e6


@dataclass(frozen=True)
class PenaltyRule:
    kind: str = "scad"
    lam: float = 1.0
    a: float = SCAD_A
    d_max: float = D_MAX

    def __post_init__(self):
        if self.kind not in ("lasso", "scad", "adaptive"):
            raise ContractError(f"unknown penalty kind {self.kind!r}")
        if not self.lam >= 0:
            raise ContractError("lambda must be nonnegative")
        if self.kind == "scad" and not self.a > 2:
            raise ContractError("SCAD requires a > 2")
        if self.kind == "adaptive" and not self.a > 0:
            raise ContractError("adaptive LASSO requires a > 0")

    def with_lambda(self, lam: float) -> "PenaltyRule":
        return PenaltyRule(self.kind, lam, self.a, self.d_max)


@dataclass(frozen=True)
class PenaltyVector:
    d: np.ndarray
    lam: float

    def __post_init__(self):
        d = np.array(self.d, dtype=float).ravel()
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ContractError("penalty weights must be finite and nonnegative")
        if not self.lam >= 0:
            raise ContractError("lambda must be nonnegative")

    def __len__(self):
        return len(self.d)

    @classmethod
    def lasso(cls, p: int, lam: float) -> "PenaltyVector":
        return cls(np.ones(p), lam)

    @classmethod
    def none(cls, p: int) -> "PenaltyVector":
        return cls(np.zeros(p), 0.0)


def gamma(rule: PenaltyRule, x):
    """Penalty derivative ``gamma_lambda(x)`` for ``x >= 0``.

    For SCAD this is ``lam * {1(x <= lam) + (a lam - x)_+ / ((a - 1) lam) 1(x > lam)}``.
    The adaptive rule ``lam * x**(-a)`` is capped at ``lam * d_max``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ContractError("gamma is defined for x >= 0")
    lam = rule.lam
    if rule.kind == "lasso":
        out = np.full_like(x, lam)
    elif rule.kind == "scad":
        if lam == 0:
            out = np.zeros_like(x)
        else:
            tail = np.maximum(rule.a * lam - x, 0.0) / ((rule.a - 1.0) * lam)
            out = lam * np.where(x <= lam, 1.0, tail)
    else:
        with np.errstate(divide="ignore"):
            out = lam * np.minimum(np.power(x, -rule.a), rule.d_max)
    return out[()] if out.ndim == 0 else out


def penalty_vector(rule: PenaltyRule, beta0) -> PenaltyVector:
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if rule.kind == "lasso":
        return PenaltyVector(np.ones(beta0.shape), rule.lam)
    if rule.lam == 0:
        raise ContractError(f"{rule.kind} weights d_j = gamma/lambda are undefined at lambda = 0")
    return PenaltyVector(gamma(rule, np.abs(beta0)) / rule.lam, rule.lam)
