"""k-means shape prototypes with per-cluster concentration estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ClusteringSpec:
    k_list: tuple = (4, 8, 16)
    max_iters: int = 50
    tol: float = 1e-6
    seed: int = 0
    concentration_alpha: float = 10.0
    concentration_smooth: str = "clip_to_percentiles"
    warmup_epoch: int = 1
    concentration_mean: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if not self.k_list:
            raise InvalidInputError("k_list must hold at least one K")
        if any(k < 2 for k in self.k_list):
            raise InvalidInputError("every K must be at least 2")
        if self.concentration_smooth != "clip_to_percentiles":
            raise InvalidInputError(f"unknown concentration smoothing {self.concentration_smooth!r}")
        if not self.concentration_mean > 0:
            raise InvalidInputError("concentration_mean must be positive")


@dataclass(frozen=True)
class Clustering:
    centroids: np.ndarray  # (K, D), unit rows
    concentrations: np.ndarray  # (K,), positive, mean 1
    assignments: np.ndarray  # (n,), int
    inertia_trace: tuple = ()

    @property
    def k(self):
        return len(self.centroids)

    @property
    def cluster_sizes(self):
        return np.bincount(self.assignments, minlength=self.k)


@dataclass(frozen=True)
class PrototypeBank:
    clusterings: list = field(default_factory=list)

    def __len__(self):
        return len(self.clusterings)

    def __getitem__(self, i):
        return self.clusterings[i]

    def largest(self):
        return max(self.clusterings, key=lambda c: c.k)

    def save(self, path, **extra):
        arrays = {}
        for i, c in enumerate(self.clusterings):
            arrays[f"c{i}_centroids"] = c.centroids
            arrays[f"c{i}_concentrations"] = c.concentrations
            arrays[f"c{i}_assignments"] = c.assignments
        for key, value in extra.items():
            arrays[key] = np.asarray(value)
        np.savez(path, n_clusterings=len(self.clusterings), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(Path(path)) as data:
            n = int(data["n_clusterings"])
            clusterings = [
                Clustering(
                    centroids=data[f"c{i}_centroids"],
                    concentrations=data[f"c{i}_concentrations"],
                    assignments=data[f"c{i}_assignments"],
                )
                for i in range(n)
            ]
        return cls(clusterings)


def _sq_dists(x, centroids):
    # unit rows: ||x - c||^2 = 2 - 2 x.c ; computed exactly for general rows
    d = (x**2).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _normalize_rows(a):
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(x, x[centers]).min(1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return x[centers].copy()


def _fill_empty(assign, dists, k):
    """Move the points farthest from their centroids into empty clusters."""
    sizes = np.bincount(assign, minlength=k)
    empty = np.flatnonzero(sizes == 0)
    if len(empty) == 0:
        return assign
    assign = assign.copy()
    own = dists[np.arange(len(assign)), assign]
    for j, idx in zip(empty, np.argsort(-own, kind="stable")):
        assign[idx] = j
    return assign


def run_kmeans(embeddings, k, spec=None, ids=None):
    """Spherical Lloyd iterations with k-means++ seeding.

    Centroids are renormalised to the unit sphere after every update, so the
    Euclidean objective decreases monotonically.  ``ids`` (default: row
    positions) fix the order in which the seeded RNG sees the data, making the
    result independent of the input permutation.

    Returns ``(centroids, assignments, inertia_trace)``.
    """
    spec = spec or ClusteringSpec()
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if k > n:
        raise InvalidInputError(f"k={k} exceeds the number of embeddings ({n})")
    if k < 1:
        raise InvalidInputError("k must be positive")
    order = np.argsort(np.arange(n) if ids is None else np.asarray(ids), kind="stable")
    xs = x[order]

    rng = np.random.default_rng(spec.seed)
    centroids = _normalize_rows(kmeans_pp_init(xs, k, rng))
    trace = []
    for _ in range(spec.max_iters):
        dists = _sq_dists(xs, centroids)
        assign = np.argmin(dists, axis=1)
        trace.append(float(dists[np.arange(n), assign].sum()))
        assign = _fill_empty(assign, dists, k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, xs)
        new = _normalize_rows(sums)
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift < spec.tol:
            break

    dists = _sq_dists(xs, centroids)
    assign = np.argmin(dists, axis=1)
    trace.append(float(dists[np.arange(n), assign].sum()))
    if np.bincount(assign, minlength=k).min() == 0:
        assign = _fill_empty(assign, dists, k)

    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = assign
    return centroids, assignments, trace


def raw_concentration(cluster_members, centroid, alpha=10.0):
    """Mean member distance to the centroid, damped by ``log(Z + alpha)``."""
    z = np.atleast_2d(np.asarray(cluster_members, dtype=np.float64))
    if z.shape[0] == 0 or z.size == 0:
        raise InvalidInputError("cannot estimate the concentration of an empty cluster")
    count = z.shape[0]
    dist = np.linalg.norm(z - np.asarray(centroid, dtype=np.float64), axis=1).sum()
    return float(dist / (count * np.log(count + alpha)))


def clip_to_percentiles(phi, lo=10, hi=90):
    low, high = np.percentile(phi, [lo, hi])
    return np.clip(phi, low, high)


def smooth_concentrations(raw, sizes, target_mean=1.0):
    """Singleton fill, [p10, p90] clipping and normalisation to ``target_mean``.

    Singleton clusters take the largest estimate among the others.  Values
    that are still non-positive after clipping are raised to the smallest
    positive value (all-zero input gives all ones).
    """
    phi = np.asarray(raw, dtype=np.float64).copy()
    multi = np.asarray(sizes) > 1
    phi[~multi] = phi[multi].max() if multi.any() else 1.0
    phi = clip_to_percentiles(phi)
    positive = phi[phi > 0]
    phi = np.maximum(phi, positive.min() if positive.size else 1.0)
    return target_mean * phi / phi.mean()


def estimate_concentration(cluster_members, centroid, alpha=10.0):
    return raw_concentration(cluster_members, centroid, alpha)


def cluster_concentrations(embeddings, centroids, assignments, alpha=10.0, target_mean=1.0):
    x = np.asarray(embeddings, dtype=np.float64)
    k = len(centroids)
    sizes = np.bincount(assignments, minlength=k)
    raw = np.array([
        raw_concentration(x[assignments == j], centroids[j], alpha) if sizes[j] else 0.0
        for j in range(k)
    ])
    return smooth_concentrations(raw, sizes, target_mean)


def build_bank(embeddings, spec, ids=None):
    """One clustering per K in ``spec.k_list``."""
    x = np.asarray(embeddings, dtype=np.float64)
    clusterings = []
    for k in spec.k_list:
        centroids, assignments, trace = run_kmeans(x, k, spec, ids=ids)
        phi = cluster_concentrations(x, centroids, assignments, spec.concentration_alpha,
                                     spec.concentration_mean)
        clusterings.append(Clustering(centroids, phi, assignments, tuple(trace)))
    return PrototypeBank(clusterings)
