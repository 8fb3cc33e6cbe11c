"""Convex loss components and their weighted combinations.

A composite loss is ``rho_w(t) = sum_k w_k rho_k(t)`` where every component is
one of three kinds:

* ``quantile``:  ``tau (t - b)_+ + (1 - tau) (t - b)_-``  (check loss)
* ``absolute``:  ``|t - b|``
* ``squared``:   ``t ** 2``  (no offset; the model errors have mean zero)

``b`` is the component's nuisance location.  All functions here are pure and
accept scalars or numpy arrays for the residual argument.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError

KINDS = ("quantile", "absolute", "squared")


@dataclass(frozen=True)
class LossComponent:
    kind: str
    tau: float = 0.5
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "quantile" and not 0.0 < self.tau < 1.0:
            raise ContractError(f"quantile level must lie in (0, 1), got {self.tau}")
        if self.kind == "squared" and self.offset != 0.0:
            raise ContractError("squared component carries no offset")

    @property
    def has_offset(self) -> bool:
        return self.kind != "squared"


@dataclass(frozen=True)
class LossBasis:
    """Ordered collection of loss components."""

    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) == 0:
            raise ContractError("a loss basis needs at least one component")
        taus = [c.tau for c in comps if c.kind == "quantile"]
        if any(t2 <= t1 for t1, t2 in zip(taus, taus[1:])):
            raise ContractError("quantile levels must be strictly increasing")
        if sum(c.kind == "squared" for c in comps) > 1:
            raise ContractError("at most one squared component is allowed")

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def kinds(self) -> tuple:
        return tuple(c.kind for c in self.components)

    @property
    def taus(self) -> np.ndarray:
        return np.array([c.tau for c in self.components])

    @property
    def offsets(self) -> np.ndarray:
        return np.array([c.offset for c in self.components])

    @property
    def offset_mask(self) -> np.ndarray:
        return np.array([c.has_offset for c in self.components])

    def with_offsets(self, offsets) -> "LossBasis":
        """Return a copy with new offsets; entries for squared components are ignored."""
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != (self.K,):
            raise ContractError(f"expected {self.K} offsets, got shape {offsets.shape}")
        comps = [c if c.kind == "squared" else replace(c, offset=float(b))
                 for c, b in zip(self.components, offsets)]
        return LossBasis(tuple(comps))

    # -- common bases ------------------------------------------------------
    @classmethod
    def squared(cls) -> "LossBasis":
        return cls((LossComponent("squared"),))

    @classmethod
    def absolute(cls, offset: float = 0.0) -> "LossBasis":
        return cls((LossComponent("absolute", offset=offset),))

    @classmethod
    def l1l2(cls, offset: float = 0.0) -> "LossBasis":
        return cls((LossComponent("absolute", offset=offset), LossComponent("squared")))

    @classmethod
    def cqr(cls, K: int, offsets: Sequence[float] | None = None) -> "LossBasis":
        taus = quantile_grid(K)
        offsets = np.zeros(K) if offsets is None else np.asarray(offsets, dtype=float)
        return cls(tuple(LossComponent("quantile", tau=float(t), offset=float(b))
                         for t, b in zip(taus, offsets)))


@dataclass(frozen=True)
class CompositeWeights:
    w: np.ndarray
    mode: str = "constrained"
    # set when the weights came from a ridge-regularized solve of a singular system
    regularized: bool = False

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        if self.mode not in ("constrained", "unconstrained"):
            raise ContractError(f"unknown weight mode {self.mode!r}")
        if not np.all(np.isfinite(w)):
            raise ContractError("weights must be finite")
        if np.all(w == 0):
            raise ContractError("weights must not all be zero")
        if self.mode == "constrained" and np.any(w < 0):
            raise ContractError("constrained weights must be nonnegative")

    def __len__(self):
        return len(self.w)

    def scaled(self, c: float) -> "CompositeWeights":
        return CompositeWeights(c * self.w, self.mode, self.regularized)


def as_weights(w, mode: str = "constrained") -> CompositeWeights:
    if isinstance(w, CompositeWeights):
        return w
    return CompositeWeights(np.atleast_1d(np.asarray(w, dtype=float)), mode)


def _check(basis: LossBasis, w: CompositeWeights):
    if len(basis) != len(w):
        raise ContractError(f"basis has {len(basis)} components but {len(w)} weights were given")


def component_loss(comp: LossComponent, r):
    r = np.asarray(r, dtype=float)
    if comp.kind == "squared":
        return r * r
    t = r - comp.offset
    if comp.kind == "absolute":
        return np.abs(t)
    return np.where(t > 0, comp.tau * t, (comp.tau - 1.0) * t)


def component_subgradient(comp: LossComponent, r):
    """Fixed subgradient selection: right-continuous at the kink.

    quantile -> tau - 1{t < 0} (equals tau at t = 0), absolute -> sign(t)
    (0 at t = 0), squared -> 2 r.
    """
    r = np.asarray(r, dtype=float)
    if comp.kind == "squared":
        return 2.0 * r
    t = r - comp.offset
    if comp.kind == "absolute":
        return np.sign(t)
    return comp.tau - (t < 0).astype(float)


def composite_loss(basis: LossBasis, w, r):
    w = as_weights(w, "unconstrained")
    _check(basis, w)
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    for wk, comp in zip(w.w, basis):
        if wk != 0.0:
            out = out + wk * component_loss(comp, r)
    return out[()] if out.ndim == 0 else out


def composite_subgradient(basis: LossBasis, w, r):
    w = as_weights(w, "unconstrained")
    _check(basis, w)
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    for wk, comp in zip(w.w, basis):
        if wk != 0.0:
            out = out + wk * component_subgradient(comp, r)
    return out[()] if out.ndim == 0 else out


def _piece_slopes(comp: LossComponent):
    if comp.kind == "absolute":
        return -1.0, 1.0
    return comp.tau - 1.0, comp.tau


def prox_composite(basis: LossBasis, w, v, step: float):
    """Exact proximal map ``argmin_z rho_w(z) + (z - v)^2 / (2 step)``.

    ``rho_w`` is convex piecewise quadratic with kinks at the offsets of the
    non-squared components, so the optimality map ``phi(z) = rho_w'(z) +
    (z - v) / step`` is increasing; we scan the sorted kinks for its zero.
    """
    w = as_weights(w)
    _check(basis, w)
    if w.mode != "constrained":
        raise ContractError("prox is only defined for convex (constrained) weights")
    if not step > 0:
        raise ContractError("step must be positive")
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)

    w_sq = 0.0
    kinks, lo, hi = [], [], []
    for wk, comp in zip(w.w, basis):
        if wk == 0.0:
            continue
        if comp.kind == "squared":
            w_sq += wk
        else:
            s_lo, s_hi = _piece_slopes(comp)
            kinks.append(comp.offset)
            lo.append(wk * s_lo)
            hi.append(wk * s_hi)
    curv = 1.0 + 2.0 * step * w_sq
    if not kinks:
        z = v / curv
        return z[0] if scalar else z

    kinks, lo, hi = np.array(kinks), np.array(lo), np.array(hi)
    bp = np.unique(kinks)
    # slope of the piecewise-linear part on interval j = (bp[j-1], bp[j])
    slopes = np.array([lo.sum()] + [np.where(kinks <= b, hi, lo).sum() for b in bp])
    edges = np.concatenate(([-np.inf], bp, [np.inf]))
    z = np.full(v.shape, np.nan)
    for j, s in enumerate(slopes):
        cand = (v - step * s) / curv
        ok = (cand >= edges[j]) & (cand <= edges[j + 1]) & np.isnan(z)
        z[ok] = cand[ok]
    for j, b in enumerate(bp):
        # phi(b-) <= 0 <= phi(b+) puts the minimizer on the kink
        left = slopes[j] + 2.0 * w_sq * b + (b - v) / step
        right = slopes[j + 1] + 2.0 * w_sq * b + (b - v) / step
        ok = (left <= 0) & (right >= 0) & np.isnan(z)
        z[ok] = b
    return z[0] if scalar else z


def quantile_grid(K: int) -> np.ndarray:
    """Equally spaced levels ``(1/(K+1), ..., K/(K+1))``."""
    if int(K) != K or K < 1:
        raise ContractError(f"K must be a positive integer, got {K}")
    K = int(K)
    return np.arange(1, K + 1) / (K + 1.0)
