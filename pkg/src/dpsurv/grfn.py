"""Gaussian random fuzzy number (GRFN) algebra.

A GRFN describes a real-valued quantity with two kinds of uncertainty: the
aleatory variance ``sigma2`` of its Gaussian mode and an epistemic precision
``h >= 0``.  ``h = 0`` is vacuous evidence (everything fully plausible,
nothing believed); as ``h`` grows the GRFN degenerates into an ordinary
Gaussian.  Belief and plausibility of intervals and half-lines have closed
forms in the standard normal CDF; seeded Monte Carlo estimators of the same
quantities are provided as independent test oracles.

All operations are pure functions of immutable values and are safe to call
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "GRFN",
    "Interval",
    "MixtureGRFN",
    "UnattainableLevelError",
    "VacuousCombinationError",
    "bel_halfline",
    "bel_interval",
    "bel_set",
    "bpi",
    "combine",
    "contour",
    "mc_oracle_bel",
    "mc_oracle_pl",
    "mixture_bel",
    "mixture_pl",
    "pl_halfline",
    "pl_interval",
    "pl_set",
    "ppi",
]

# Arguments to the normal CDF are clamped here: beyond +-38 the CDF is 0/1 to
# double precision, and clamping keeps infinite ratios out of ndtr.
_PHI_CLAMP = 38.0


class VacuousCombinationError(ValueError):
    """Combination has zero total evidence weight (sum of s*h is 0)."""


class UnattainableLevelError(ValueError):
    """Requested belief level exceeds what the evidence can support."""


def _phi(z: float) -> float:
    if z > _PHI_CLAMP:
        z = _PHI_CLAMP
    elif z < -_PHI_CLAMP:
        z = -_PHI_CLAMP
    return float(ndtr(z))


def _ratio(num: float, denom: float) -> float:
    # (x - mu) / sigma with the sigma -> 0 limit: sign(num) * inf, 0 at num = 0.
    if denom > 0.0:
        return num / denom
    if num == 0.0:
        return 0.0
    return math.copysign(math.inf, num)


def _clip01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


@dataclass(frozen=True)
class GRFN:
    """Gaussian random fuzzy number with location mu, aleatory variance
    sigma2 and epistemic precision h (both nonnegative, all finite)."""

    mu: float
    sigma2: float
    h: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")
        if not (math.isfinite(self.sigma2) and self.sigma2 >= 0.0):
            raise ValueError(f"sigma2 must be finite and >= 0, got {self.sigma2}")
        if not (math.isfinite(self.h) and self.h >= 0.0):
            raise ValueError(f"h must be finite and >= 0, got {self.h}")


@dataclass(frozen=True)
class Interval:
    """Closed interval; lo = -inf or hi = +inf encode half-lines."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise ValueError("interval ends must not be NaN")
        if self.lo > self.hi:
            raise ValueError(f"interval requires lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def finite(self) -> bool:
        return math.isfinite(self.lo) and math.isfinite(self.hi)


@dataclass(frozen=True)
class MixtureGRFN:
    """Convex mixture of GRFNs; belief and plausibility are the
    weight-averaged component values."""

    weights: tuple[float, ...]
    components: tuple[GRFN, ...]

    def __init__(self, weights: Sequence[float], components: Sequence[GRFN]) -> None:
        w = tuple(float(x) for x in weights)
        comps = tuple(components)
        if len(w) != len(comps) or len(w) < 1:
            raise ValueError("weights and components must have equal length >= 1")
        if any(x < 0.0 for x in w):
            raise ValueError("mixture weights must be nonnegative")
        if abs(math.fsum(w) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {math.fsum(w)}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)


def contour(g: GRFN, x: float) -> float:
    """Plausibility of the singleton {x}; maximal at x = mu with value
    (1 + h*sigma2)^(-1/2)."""
    q = 1.0 + g.h * g.sigma2
    return math.exp(-g.h * (x - g.mu) ** 2 / (2.0 * q)) / math.sqrt(q)


def pl_interval(g: GRFN, iv: Interval) -> float:
    """Plausibility of a finite interval [x, y]."""
    if not iv.finite:
        raise ValueError("pl_interval requires finite ends; use pl_halfline")
    if g.h == 0.0:
        return 1.0  # vacuous evidence: everything fully plausible
    x, y = iv.lo, iv.hi
    sig = math.sqrt(g.sigma2)
    sq = sig * math.sqrt(1.0 + g.h * g.sigma2)
    cum_x = _phi(_ratio(x - g.mu, sig))
    cum_y = _phi(_ratio(y - g.mu, sig))
    wx = _phi(_ratio(x - g.mu, sq))
    wy = _phi(_ratio(y - g.mu, sq))
    val = cum_y - cum_x + contour(g, x) * wx + contour(g, y) * (1.0 - wy)
    return _clip01(val)


def bel_interval(g: GRFN, iv: Interval) -> float:
    """Belief of a finite interval [x, y]; always <= pl_interval."""
    if not iv.finite:
        raise ValueError("bel_interval requires finite ends; use bel_halfline")
    if g.h == 0.0:
        return 0.0  # vacuous evidence supports nothing
    x, y = iv.lo, iv.hi
    sig = math.sqrt(g.sigma2)
    sq = sig * math.sqrt(1.0 + g.h * g.sigma2)
    cum_x = _phi(_ratio(x - g.mu, sig))
    cum_y = _phi(_ratio(y - g.mu, sig))
    wx = _phi(_ratio(x - g.mu, sq))
    wy = _phi(_ratio(y - g.mu, sq))
    mid = 0.5 * (x + y)
    shift = 0.5 * (y - x) * g.h * g.sigma2
    lower_leak = _phi(_ratio(mid - g.mu + shift, sq)) - wx
    upper_gain = _phi(_ratio(mid - g.mu - shift, sq)) - wy
    val = cum_y - cum_x - contour(g, x) * lower_leak + contour(g, y) * upper_gain
    return _clip01(val)


def _halfline(g: GRFN, x: float) -> tuple[float, float]:
    # Shared evaluation so Pl - Bel = contour(x) holds to the ulp.
    if g.h == 0.0:
        return 0.0, 1.0
    sig = math.sqrt(g.sigma2)
    sq = sig * math.sqrt(1.0 + g.h * g.sigma2)
    c = contour(g, x)
    pl = 1.0 - _phi(_ratio(x - g.mu, sig)) + c * _phi(_ratio(x - g.mu, sq))
    return _clip01(pl - c), _clip01(pl)


def bel_halfline(g: GRFN, x: float) -> float:
    """Belief of [x, +inf); the lower survival bound at log-time x."""
    return _halfline(g, x)[0]


def pl_halfline(g: GRFN, x: float) -> float:
    """Plausibility of [x, +inf); the upper survival bound at log-time x."""
    return _halfline(g, x)[1]


def bel_set(g: GRFN, iv: Interval) -> float:
    """Belief of an interval with possibly infinite ends."""
    lo_inf, hi_inf = math.isinf(iv.lo), math.isinf(iv.hi)
    if not lo_inf and not hi_inf:
        return bel_interval(g, iv)
    if lo_inf and hi_inf:
        return 1.0
    if hi_inf:
        return bel_halfline(g, iv.lo)
    return _clip01(1.0 - pl_halfline(g, iv.hi))


def pl_set(g: GRFN, iv: Interval) -> float:
    """Plausibility of an interval with possibly infinite ends."""
    lo_inf, hi_inf = math.isinf(iv.lo), math.isinf(iv.hi)
    if not lo_inf and not hi_inf:
        return pl_interval(g, iv)
    if lo_inf and hi_inf:
        return 1.0
    if hi_inf:
        return pl_halfline(g, iv.lo)
    return _clip01(1.0 - bel_halfline(g, iv.hi))


def combine(evidence: Sequence[tuple[float, GRFN]]) -> GRFN:
    """Unnormalized product-intersection combination of similarity-weighted
    evidence: precisions add, locations average by s*h, variance contracts.

    Raises VacuousCombinationError when the total weight sum(s*h) is zero.
    """
    if len(evidence) == 0:
        raise ValueError("combine requires at least one evidence item")
    for s, _ in evidence:
        if not (0.0 <= s <= 1.0):
            raise ValueError(f"similarity must lie in [0, 1], got {s}")
    sh = [s * g.h for s, g in evidence]
    total = math.fsum(sh)
    if total <= 0.0:
        raise VacuousCombinationError("all evidence items have zero effective weight")
    mu = math.fsum(w * g.mu for w, (_, g) in zip(sh, evidence)) / total
    var = math.fsum(w * w * g.sigma2 for w, (_, g) in zip(sh, evidence)) / total**2
    return GRFN(mu, var, total)


def mixture_bel(m: MixtureGRFN, iv: Interval) -> float:
    """Weighted sum of component beliefs."""
    return math.fsum(w * bel_set(g, iv) for w, g in zip(m.weights, m.components))


def mixture_pl(m: MixtureGRFN, iv: Interval) -> float:
    """Weighted sum of component plausibilities."""
    return math.fsum(w * pl_set(g, iv) for w, g in zip(m.weights, m.components))


def bpi(g: GRFN, alpha: float, tol: float = 1e-10, max_iter: int = 200) -> Interval:
    """Belief prediction interval: the centered interval [mu - v, mu + v]
    whose belief equals alpha, found by bisection on the half-width.

    Raises UnattainableLevelError when no finite interval reaches alpha
    (e.g. vacuous evidence, h = 0).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")

    def bel_at(v: float) -> float:
        return bel_interval(g, Interval(g.mu - v, g.mu + v))

    hi = math.sqrt(g.sigma2) + 1.0
    for _ in range(200):
        if bel_at(hi) >= alpha:
            break
        hi *= 2.0
    else:
        raise UnattainableLevelError(
            f"belief level {alpha} unattainable (sup over centered intervals is "
            f"{bel_at(hi):.6g})"
        )
    lo = 0.0
    mid = hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        b = bel_at(mid)
        if abs(b - alpha) <= tol:
            break
        if b < alpha:
            lo = mid
        else:
            hi = mid
    return Interval(g.mu - mid, g.mu + mid)


def ppi(g: GRFN, alpha: float) -> Interval:
    """Probabilistic prediction interval mu +- z*sigma with z the standard
    normal quantile at (1 + alpha) / 2; ignores epistemic precision."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    half = float(ndtri(0.5 * (1.0 + alpha))) * math.sqrt(g.sigma2)
    return Interval(g.mu - half, g.mu + half)


def _mode_samples(g: GRFN, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return g.mu + math.sqrt(g.sigma2) * rng.standard_normal(n)


def mc_oracle_pl(g: GRFN, iv: Interval, n: int, seed: int) -> float:
    """Monte Carlo plausibility: mean over sampled modes of the membership
    function's supremum over iv.  Deterministic given the seed; the standard
    error is at most 1 / (2 sqrt(n))."""
    if g.h == 0.0:
        _mode_samples(g, n, seed)
        return 1.0
    m = _mode_samples(g, n, seed)
    dist = np.maximum(np.maximum(iv.lo - m, m - iv.hi), 0.0)
    return float(np.mean(np.exp(-0.5 * g.h * dist**2)))


def mc_oracle_bel(g: GRFN, iv: Interval, n: int, seed: int) -> float:
    """Monte Carlo belief via duality: one minus the Monte Carlo plausibility
    of the complement of iv, using the same mode samples."""
    if g.h == 0.0:
        _mode_samples(g, n, seed)
        return 0.0
    m = _mode_samples(g, n, seed)
    dist = np.maximum(np.minimum(m - iv.lo, iv.hi - m), 0.0)
    return float(1.0 - np.mean(np.exp(-0.5 * g.h * dist**2)))
