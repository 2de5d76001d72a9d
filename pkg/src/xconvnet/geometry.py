"""Point-set operations: neighbor search, subset selection, local frames.

All functions are pure given an explicit ``numpy.random.Generator``;
:class:`PointSet` instances are treated as immutable after construction.
Nearest-neighbor search is exact (full distance evaluation) and every
tie is broken by ascending source index, which keeps brute-force test
oracles deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class PointSet:
    """N points with optional per-point features and labels.

    Attributes:
        coords: (N, Dim) float64 coordinates, Dim in {2, 3}.
        features: optional (N, C) float64 feature matrix.
        point_labels: optional (N,) integer labels (segmentation).
        cloud_label: optional integer label for the whole cloud.
    """

    coords: np.ndarray
    features: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    cloud_label: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be (N>=1, Dim), got {self.coords.shape}")
        if self.coords.shape[1] not in (2, 3):
            raise ValueError(f"Dim must be 2 or 3, got {self.coords.shape[1]}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain non-finite values")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.coords.shape[0]:
                raise ValueError(
                    f"features rows {self.features.shape[0]} != N {self.coords.shape[0]}")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (self.coords.shape[0],):
                raise ValueError("point_labels length must equal N")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def take(self, indices: np.ndarray) -> "PointSet":
        """New PointSet holding the selected rows (labels follow)."""
        indices = np.asarray(indices)
        return PointSet(
            coords=self.coords[indices],
            features=None if self.features is None else self.features[indices],
            point_labels=None if self.point_labels is None else self.point_labels[indices],
            cloud_label=self.cloud_label,
        )


@dataclass
class Neighborhood:
    """K source points gathered around one representative point."""

    rep_index: int
    rep_coord: np.ndarray
    neighbor_indices: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))


def _rank_by_distance(coords: np.ndarray, query: np.ndarray) -> np.ndarray:
    """All source indices ordered by distance to ``query``, ties by index."""
    d2 = np.sum((coords - query) ** 2, axis=1)
    return np.argsort(d2, kind="stable")


def knn(source: PointSet, query: np.ndarray, k: int) -> np.ndarray:
    """k nearest source points to ``query`` under Euclidean distance.

    Returns indices sorted by ascending distance; exact ties are resolved
    toward the smaller source index.
    """
    if k > source.n_points:
        raise ValueError(f"k={k} exceeds point count {source.n_points}")
    if k < 1:
        raise ValueError("k must be >= 1")
    return _rank_by_distance(source.coords, np.asarray(query, dtype=np.float64))[:k]


def knn_batch(source_coords: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Row i holds the k nearest source indices to queries[i] (same tie rule)."""
    if k > source_coords.shape[0]:
        raise ValueError(f"k={k} exceeds point count {source_coords.shape[0]}")
    diff = queries[:, None, :] - source_coords[None, :, :]
    d2 = np.einsum("qnd,qnd->qn", diff, diff)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def dilated_sample(source: PointSet, query: np.ndarray, k: int, d: int,
                   rng: np.random.Generator, rep_index: int = -1) -> Neighborhood:
    """Uniformly pick k distinct points out of the k*d nearest to ``query``.

    With d=1 the result is the plain knn set in shuffled order.
    """
    if d < 1:
        raise ValueError("dilation must be >= 1")
    if k * d > source.n_points:
        raise ValueError(
            f"k*d={k * d} exceeds point count {source.n_points}")
    pool = knn(source, query, k * d)
    chosen = rng.choice(k * d, size=k, replace=False)
    return Neighborhood(rep_index=rep_index,
                        rep_coord=np.asarray(query, dtype=np.float64),
                        neighbor_indices=pool[chosen])


def dilated_sample_batch(source_coords: np.ndarray, queries: np.ndarray,
                         k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized dilated neighbor selection; row i serves queries[i]."""
    if k * d > source_coords.shape[0]:
        raise ValueError(
            f"k*d={k * d} exceeds point count {source_coords.shape[0]}")
    pool = knn_batch(source_coords, queries, k * d)
    picks = np.argsort(rng.random(pool.shape), axis=1)[:, :k]
    return np.take_along_axis(pool, picks, axis=1)


def fps_indices(coords: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point selection on a raw coordinate array."""
    n = coords.shape[0]
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    min_d2 = np.sum((coords - coords[chosen[0]]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def farthest_point_sample(source: PointSet, m: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point subset of size m.

    The seed point is drawn from ``rng``; each later pick maximizes the
    minimum distance to the already-chosen set, ties toward the smaller
    index. Any prefix of the result is the farthest-point result of its
    own length for the same seed.
    """
    if m > source.n_points:
        raise ValueError(f"m={m} exceeds point count {source.n_points}")
    if m < 1:
        raise ValueError("m must be >= 1")
    return fps_indices(source.coords, m, rng)


def random_downsample(source: PointSet, m: int,
                      rng: np.random.Generator) -> np.ndarray:
    """m distinct uniformly chosen point indices."""
    if m > source.n_points:
        raise ValueError(f"m={m} exceeds point count {source.n_points}")
    if m < 1:
        raise ValueError("m must be >= 1")
    return rng.choice(source.n_points, size=m, replace=False)


def localize(neighbor_coords: np.ndarray, rep_coord: np.ndarray) -> np.ndarray:
    """Shift neighbor coordinates into the representative point's frame."""
    return np.asarray(neighbor_coords, dtype=np.float64) - np.asarray(
        rep_coord, dtype=np.float64)


def receptive_field(k: int, d: int, n_prev: int) -> float:
    """Fraction of the previous layer a representative point can draw from."""
    if n_prev < 1:
        raise ValueError("n_prev must be >= 1")
    return min(1.0, (k * d) / n_prev)


def gaussian_resample(source: PointSet, n_target: int,
                      rng: np.random.Generator) -> PointSet:
    """Resample to ~Normal(n_target, (n_target/8)^2) points in shuffled order.

    Draws with replacement when the drawn count exceeds the source size,
    without replacement otherwise. The count is clamped to
    [1, 4 * n_target].
    """
    if source.n_points < 1:
        raise ValueError("source must contain at least one point")
    n = int(round(rng.normal(n_target, n_target / 8.0)))
    n = max(1, min(n, 4 * n_target))
    if n > source.n_points:
        idx = rng.choice(source.n_points, size=n, replace=True)
    else:
        idx = rng.choice(source.n_points, size=n, replace=False)
    rng.shuffle(idx)
    return source.take(idx)


def shuffle_points(source: PointSet, rng: np.random.Generator) -> PointSet:
    """Same points in a fresh uniformly random order."""
    return source.take(rng.permutation(source.n_points))


def bounding_radius(coords: np.ndarray) -> float:
    """Radius of the centroid-centered bounding sphere (>= tiny epsilon)."""
    center = coords.mean(axis=0)
    return max(float(np.sqrt(np.max(np.sum((coords - center) ** 2, axis=1)))), 1e-12)
