"""Per-slide Gaussian mixture embedding.

Each slide's patch embeddings are summarized by a diagonal-covariance GMM
fitted with EM, seeded at shared patch prototypes (k-means centroids over a
pooled patch sample).  The fitted (weight, mean, variance) triples form the
slide embedding; the per-patch argmax posterior gives the assignment map.

Fitting different slides concurrently is safe: everything here is a pure
function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .clustering import kmeans

__all__ = [
    "GMMParams",
    "PatchPrototypes",
    "SlideEmbedding",
    "VARIANCE_FLOOR",
    "assignment_map",
    "em_fit",
    "fit_patch_prototypes",
    "log_likelihood",
    "slide_embedding",
]

VARIANCE_FLOOR = 1e-6
_EMPTY_RESP = 1e-12


def _as_patches(patches: np.ndarray) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("patches must be a nonempty 2-D array")
    if not np.isfinite(x).all():
        raise ValueError("patches must be finite")
    return x


@dataclass(frozen=True)
class PatchPrototypes:
    """Shared k-means centroids used to seed per-slide component means."""

    means: np.ndarray  # (C, d)

    def __post_init__(self) -> None:
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError("prototype means must be a nonempty 2-D array")
        if not np.isfinite(m).all():
            raise ValueError("prototype means must be finite")
        object.__setattr__(self, "means", m)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _check_simplex(weights: np.ndarray) -> None:
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("component weights must lie on the simplex")


@dataclass(frozen=True)
class GMMParams:
    """Diagonal-covariance mixture parameters for one slide."""

    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or m.shape != (w.size, m.shape[1]) or v.shape != m.shape:
            raise ValueError("inconsistent GMM parameter shapes")
        _check_simplex(w)
        if (v < VARIANCE_FLOOR * (1.0 - 1e-12)).any():
            raise ValueError("variances below the floor")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class SlideEmbedding:
    """Slide-level summary: per component a (weight, mean, variance) triple.

    The flattened form is C rows of [weight, mean..., variance...], i.e.
    C x (2d + 1) values in that fixed order.
    """

    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, d)
    variances: np.ndarray  # (C, d)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or m.shape[0] != w.size or v.shape != m.shape:
            raise ValueError("inconsistent slide embedding shapes")
        _check_simplex(w)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, c: int) -> tuple[float, np.ndarray, np.ndarray]:
        return float(self.weights[c]), self.means[c], self.variances[c]

    def component_vector(self, c: int) -> np.ndarray:
        """Flattened per-component feature [weight, mean, variance]."""
        return np.concatenate(([self.weights[c]], self.means[c], self.variances[c]))

    def flattened(self) -> np.ndarray:
        return np.stack([self.component_vector(c) for c in range(self.n_components)])


def fit_patch_prototypes(
    sample: np.ndarray, n_prototypes: int, seed: int, max_iter: int = 100
) -> PatchPrototypes:
    """K-means centroids over a pooled patch sample; deterministic per seed."""
    x = _as_patches(sample)
    if n_prototypes > x.shape[0]:
        raise ValueError(
            f"cannot fit {n_prototypes} prototypes from {x.shape[0]} patches"
        )
    rng = np.random.default_rng(seed)
    centers, _ = kmeans(x, n_prototypes, rng, max_iter=max_iter)
    return PatchPrototypes(means=centers)


def _log_densities(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for c in range(means.shape[0]):
        out[:, c] = -0.5 * (
            d * np.log(2.0 * np.pi)
            + np.log(variances[c]).sum()
            + ((x - means[c]) ** 2 / variances[c]).sum(axis=1)
        )
    return out


def log_likelihood(patches: np.ndarray, params: GMMParams) -> float:
    """Total log-likelihood, computed with a log-sum-exp over components."""
    x = _as_patches(patches)
    if x.shape[1] != params.dim:
        raise ValueError("patch dimension does not match parameters")
    scores = _log_densities(x, params.means, params.variances) + np.log(
        np.maximum(params.weights, 1e-300)
    )
    return float(logsumexp(scores, axis=1).sum())


def em_fit(
    patches: np.ndarray,
    init: PatchPrototypes,
    max_iter: int = 100,
    tol: float = 1e-5,
    callback: Callable[[float], None] | None = None,
) -> GMMParams:
    """Fit a diagonal-covariance GMM by EM.

    Weights start uniform, means at the shared prototypes, variances at the
    slide's global per-dimension variance.  Stops when the relative
    log-likelihood improvement drops below tol; the log-likelihood sequence
    is nondecreasing.  ``callback`` receives the log-likelihood once per
    iteration (before the parameter update).
    """
    x = _as_patches(patches)
    if init.dim != x.shape[1]:
        raise ValueError("prototype dimension does not match patches")
    n, _ = x.shape
    n_comp = init.count
    weights = np.full(n_comp, 1.0 / n_comp)
    means = init.means.copy()
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    variances = np.tile(global_var, (n_comp, 1))

    prev = -np.inf
    for it in range(max_iter):
        scores = _log_densities(x, means, variances) + np.log(
            np.maximum(weights, 1e-300)
        )
        norm = logsumexp(scores, axis=1)
        ll = float(norm.sum())
        if not np.isfinite(ll):
            raise RuntimeError(
                f"EM log-likelihood became non-finite at iteration {it} "
                f"(n={n}, components={n_comp})"
            )
        if callback is not None:
            callback(ll)
        if it > 0 and abs(ll - prev) <= tol * max(1.0, abs(prev)):
            break
        prev = ll

        resp = np.exp(scores - norm[:, None])
        totals = resp.sum(axis=0)
        empty = np.flatnonzero(totals < _EMPTY_RESP)
        if empty.size:
            # Rescue: move each empty component onto the least-claimed patch
            # and hand it a uniform share of the weight.
            orphan_order = np.argsort(resp.max(axis=1))
            for pos, c in enumerate(empty):
                means[c] = x[orphan_order[pos % n]]
                variances[c] = global_var
            keep = np.setdiff1d(np.arange(n_comp), empty)
            weights = weights.copy()
            weights[empty] = 1.0 / n_comp
            rest = weights[keep].sum()
            if rest > 0:
                weights[keep] *= (1.0 - empty.size / n_comp) / rest
            weights /= weights.sum()
            continue

        weights = totals / n
        means = (resp.T @ x) / totals[:, None]
        for c in range(n_comp):
            diff2 = (x - means[c]) ** 2
            variances[c] = np.maximum(
                (resp[:, c] @ diff2) / totals[c], VARIANCE_FLOOR
            )

    weights = weights / weights.sum()
    return GMMParams(weights=weights, means=means, variances=variances)


def slide_embedding(params: GMMParams) -> SlideEmbedding:
    """Repackage fitted mixture parameters as the slide embedding."""
    return SlideEmbedding(
        weights=params.weights.copy(),
        means=params.means.copy(),
        variances=params.variances.copy(),
    )


def assignment_map(patches: np.ndarray, params: GMMParams) -> np.ndarray:
    """Per-patch argmax posterior component label; ties go to the lowest
    component index."""
    x = _as_patches(patches)
    if x.shape[1] != params.dim:
        raise ValueError("patch dimension does not match parameters")
    scores = _log_densities(x, params.means, params.variances) + np.log(
        np.maximum(params.weights, 1e-300)
    )
    return scores.argmax(axis=1).astype(np.int64)
