"""Deterministic seeded k-means with k-means++ initialization."""

from __future__ import annotations

import numpy as np


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(0, n)]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a center; any pick works
            centers[i] = points[rng.integers(0, n)]
        else:
            centers[i] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Cluster points into k centers; deterministic for a fixed seed.

    Stops after max_iter iterations or when the relative center shift drops
    below tol. Empty clusters are reseeded with the point farthest from its
    assigned center.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty 2D point matrix")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= points.shape[0]:
        return points.copy()
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(points, k, rng)
    for _ in range(max_iter):
        d2 = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                worst = int(np.argmax(d2[np.arange(points.shape[0]), assign]))
                new_centers[j] = points[worst]
        shift = np.linalg.norm(new_centers - centers)
        scale = np.linalg.norm(centers)
        centers = new_centers
        if shift <= tol * max(scale, 1.0):
            break
    return centers
