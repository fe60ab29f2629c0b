"""Lloyd's k-means with k-means++ seeding and optional sample weights.

Used both for the shared patch prototypes (unweighted, large pooled sample)
and for the evidential initialization (small weighted sample per component).
Deterministic for a given generator state; empty clusters are repaired by
reseeding from the point farthest from its assigned centroid.
"""

from __future__ import annotations

import numpy as np

__all__ = ["kmeans"]


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (points**2).sum(axis=1)[:, None]
        + (centers**2).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0)


def _plus_plus_seed(
    points: np.ndarray, k: int, w: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    n = points.shape[0]
    total = w.sum()
    probs = w / total if total > 0 else np.full(n, 1.0 / n)
    centers = np.empty((k, points.shape[1]))
    idx = int(rng.choice(n, p=probs))
    centers[0] = points[idx]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        wd = w * d2
        s = wd.sum()
        if s > 0:
            idx = int(rng.choice(n, p=wd / s))
        else:
            idx = int(rng.choice(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster points (n, d) into k centroids; returns (centers, labels).

    Requires k <= n.  Ties in the assignment step go to the lowest cluster
    index.  With weights, centroids are weighted means and the seeding
    probabilities are weight-scaled.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("weights must be a nonnegative vector matching points")

    centers = _plus_plus_seed(points, k, w, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = _pairwise_sq_dists(points, centers)
        new_labels = d2.argmin(axis=1)
        for c in range(k):
            if not (new_labels == c).any():
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                new_labels[far] = c
                d2[far, :] = 0.0
        if np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(k):
            member = labels == c
            wc = w[member]
            if wc.sum() > 0:
                centers[c] = (points[member] * wc[:, None]).sum(axis=0) / wc.sum()
            else:
                centers[c] = points[member].mean(axis=0)
    return centers, labels
