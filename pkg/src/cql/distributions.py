"""Error-distribution catalog used by the efficiency engine and the simulations.

Every distribution is shifted to mean zero.  Densities, CDFs and scores
come from scipy.stats; mixtures are handled component-wise, with the score
``f'/f`` formed from log-domain responsibilities so it stays finite in the
tails.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, stats

from .errors import ContractError, InputError, NumericalError

CATALOG = ("de", "t4", "normal", "gamma", "beta", "mns", "mnl")
LABELS = {"de": "DE", "t4": "t4", "normal": "N(0,s2)", "gamma": "Gamma(3,1)", "beta": "Beta(3,5)",
          "mns": "MN_s", "mnl": "MN_l", "uniform": "U(-sqrt3,sqrt3)"}
ALIASES = {"double_exponential": "de", "laplace": "de", "student_t": "t4", "t": "t4",
           "gaussian": "normal", "n": "normal", "normal_scale_mixture": "mns",
           "normal_location_mixture": "mnl"}

QUAD = dict(epsabs=1e-12, epsrel=1e-11, limit=400)


def _normal_score(mu, s):
    return lambda x: -(x - mu) / s ** 2


@dataclass(frozen=True)
class ErrorDistribution:
    """A centered member of the catalog.

    ``sigma`` is the standard deviation of the normal kind (ignored elsewhere).
    ``uniform`` (on ``(-sqrt 3, sqrt 3)``) is available for tests only and is
    not part of ``CATALOG``.
    """

    kind: str
    sigma: float = 1.0

    def __post_init__(self):
        kind = ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in CATALOG and kind != "uniform":
            raise InputError(f"unknown distribution {self.kind!r}; expected one of {', '.join(CATALOG)}")
        if kind == "normal" and not self.sigma > 0:
            raise ContractError("normal sigma must be positive")
        object.__setattr__(self, "kind", kind)
        comps, _, lo, hi = _build(kind, self.sigma)
        object.__setattr__(self, "_comps", comps)
        object.__setattr__(self, "_support", (lo, hi))

    def __reduce__(self):
        # the cached scipy components hold lambdas; rebuild them on unpickling
        return (ErrorDistribution, (self.kind, self.sigma))

    @property
    def label(self) -> str:
        if self.kind == "normal":
            return f"N(0,{self.sigma:g}^2)"
        return LABELS[self.kind]

    @property
    def support(self):
        return self._support

    # -- density pieces -----------------------------------------------------
    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(pi * d.pdf(x) for pi, d, _ in self._comps)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        parts = np.array([np.log(pi) + d.logpdf(x) for pi, d, _ in self._comps])
        return np.logaddexp.reduce(parts, axis=0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(pi * d.cdf(x) for pi, d, _ in self._comps)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(pi * d.sf(x) for pi, d, _ in self._comps)

    def score(self, x):
        """``f'(x) / f(x)`` inside the support."""
        x = np.asarray(x, dtype=float)
        if len(self._comps) == 1:
            return self._comps[0][2](x)
        logs = np.array([np.log(pi) + d.logpdf(x) for pi, d, _ in self._comps])
        resp = np.exp(logs - np.logaddexp.reduce(logs, axis=0))
        return sum(r * s(x) for r, (_, _, s) in zip(resp, self._comps))

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        if np.any((q <= 0) | (q >= 1)):
            raise ContractError("quantile levels must lie in (0, 1)")
        if len(self._comps) == 1:
            return self._comps[0][1].ppf(q)
        out = np.vectorize(self._ppf_scalar)(q)
        return out[()] if out.ndim == 0 else out

    def _ppf_scalar(self, q):
        lo, hi = -10.0, 10.0
        while self.cdf(lo) > q:
            lo *= 2
        while self.cdf(hi) < q:
            hi *= 2
        return optimize.brentq(lambda x: self.cdf(x) - q, lo, hi, xtol=1e-14, maxiter=200)

    @property
    def median(self) -> float:
        return float(self.ppf(0.5))

    @property
    def variance(self) -> float:
        m = sum(pi * d.mean() for pi, d, _ in self._comps)
        return float(sum(pi * (d.var() + d.mean() ** 2) for pi, d, _ in self._comps) - m ** 2)

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))

    # -- integration ---------------------------------------------------------
    def expect(self, fn, lo=None, hi=None) -> float:
        """``int_lo^hi fn(x) f(x) dx`` by adaptive quadrature, split at the median."""
        a, b = self._support
        lo = a if lo is None else max(lo, a)
        hi = b if hi is None else min(hi, b)
        if hi <= lo:
            return 0.0
        integrand = lambda x: fn(x) * self.pdf(x)
        cuts = [lo] + [c for c in self._breaks() if lo < c < hi] + [hi]
        total = 0.0
        for u, v in zip(cuts[:-1], cuts[1:]):
            val, _ = integrate.quad(integrand, u, v, **QUAD)
            total += val
        return float(total)

    def _breaks(self):
        pts = {0.0}
        for _, d, _ in self._comps:
            pts.add(float(d.median()))
        return sorted(pts)

    def partial_mean(self, b) -> float:
        """``E[eps 1{eps < b}]``."""
        return self.expect(lambda x: x, hi=float(b))

    def self_check(self) -> dict:
        return {"mass": self.expect(lambda x: 1.0), "mean": self.expect(lambda x: x),
                "var": self.expect(lambda x: x * x), "variance": self.variance}

    # -- sampling ------------------------------------------------------------
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k = self.kind
        if k == "de":
            return rng.laplace(0.0, 1.0, size)
        if k == "t4":
            return rng.standard_t(4, size)
        if k == "normal":
            return rng.normal(0.0, self.sigma, size)
        if k == "gamma":
            return rng.gamma(3.0, 1.0, size) - 3.0
        if k == "beta":
            return rng.beta(3.0, 5.0, size) - 3.0 / 8.0
        if k == "uniform":
            return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size)
        if k == "mns":
            big = rng.random(size) < 0.1
            return np.where(big, 5.0, 1.0) * rng.standard_normal(size)
        # mnl
        right = rng.random(size) < 0.3
        return np.where(right, 7.0 / 3.0, -1.0) + rng.standard_normal(size)


def _build(kind, sigma):
    inf = np.inf
    if kind == "de":
        d = stats.laplace(0.0, 1.0)
        return [(1.0, d, lambda x: -np.sign(x))], 0.0, -inf, inf
    if kind == "t4":
        d = stats.t(4)
        return [(1.0, d, lambda x: -5.0 * x / (4.0 + x * x))], 0.0, -inf, inf
    if kind == "normal":
        d = stats.norm(0.0, sigma)
        return [(1.0, d, _normal_score(0.0, sigma))], 0.0, -inf, inf
    if kind == "gamma":
        d = stats.gamma(3.0, loc=-3.0)
        return [(1.0, d, lambda x: 2.0 / (x + 3.0) - 1.0)], 3.0, -3.0, inf
    if kind == "beta":
        m = 3.0 / 8.0
        d = stats.beta(3.0, 5.0, loc=-m)
        return [(1.0, d, lambda x: 2.0 / (x + m) - 4.0 / (1.0 - x - m))], m, -m, 1.0 - m
    if kind == "uniform":
        r = np.sqrt(3.0)
        d = stats.uniform(-r, 2 * r)
        return [(1.0, d, lambda x: np.zeros_like(np.asarray(x, dtype=float)))], 0.0, -r, r
    if kind == "mns":
        return [(0.1, stats.norm(0.0, 5.0), _normal_score(0.0, 5.0)),
                (0.9, stats.norm(0.0, 1.0), _normal_score(0.0, 1.0))], 0.0, -inf, inf
    if kind == "mnl":
        return [(0.7, stats.norm(-1.0, 1.0), _normal_score(-1.0, 1.0)),
                (0.3, stats.norm(7.0 / 3.0, 1.0), _normal_score(7.0 / 3.0, 1.0))], 0.0, -inf, inf
    raise InputError(kind)


def get_distribution(name, sigma: float = 1.0) -> ErrorDistribution:
    if isinstance(name, ErrorDistribution):
        return name
    return ErrorDistribution(str(name), sigma)


def catalog(sigma: float = 1.0) -> list:
    return [ErrorDistribution(k, sigma) for k in CATALOG]


def fisher_information(dist: ErrorDistribution) -> float:
    """Location Fisher information ``int (f'/f)^2 f``."""
    if dist.kind == "uniform":
        raise NumericalError("the uniform density has jumps at its endpoints; location information is infinite")
    val = dist.expect(lambda x: dist.score(x) ** 2)
    if not np.isfinite(val) or val <= 0:
        raise NumericalError(f"Fisher information integral did not converge for {dist.label}")
    return val
