"""Geometry primitives, columnar point storage, and result types.

Everything here is immutable after construction and safe to share across
concurrent readers. All distances are *squared* Euclidean distances and all
coordinates are 64-bit floats, so the engine and the brute-force oracle can
be compared for exact equality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "PointSet",
    "SplitPlane",
    "Region",
    "Neighbor",
    "KnnResult",
    "squared_distance",
    "sq_dists_to_columns",
    "min_sq_dist_to_region",
]


@dataclass(frozen=True, eq=False)
class PointSet:
    """Columnar store of n points in D dimensions with stable point ids.

    ``coords`` has shape (dims, count) so each dimension is one contiguous
    row (column-major point layout); ``ids`` holds one unique uint64 per
    point. Instances are treated as immutable.
    """

    coords: np.ndarray
    ids: np.ndarray

    @property
    def dims(self) -> int:
        return self.coords.shape[0]

    @property
    def count(self) -> int:
        return self.coords.shape[1]

    @staticmethod
    def create(coords: np.ndarray, ids: np.ndarray | None = None) -> "PointSet":
        """Build a validated PointSet from a (dims, count) coordinate array.

        Rejects non-finite coordinates and duplicate ids, per the ingestion
        contract; downstream code relies on both.
        """
        coords = np.ascontiguousarray(coords, dtype=np.float64)
        if coords.ndim != 2:
            raise ValueError(f"coords must be 2-D (dims, count), got shape {coords.shape}")
        n = coords.shape[1]
        if ids is None:
            ids = np.arange(n, dtype=np.uint64)
        else:
            ids = np.ascontiguousarray(ids, dtype=np.uint64)
        ps = PointSet(coords, ids)
        ps.validate()
        return ps

    @staticmethod
    def from_rows(rows: np.ndarray | Sequence[Sequence[float]], ids: np.ndarray | None = None) -> "PointSet":
        """Build from an (count, dims) row-major array of points."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        return PointSet.create(rows.T, ids)

    @staticmethod
    def empty(dims: int) -> "PointSet":
        return PointSet(np.empty((dims, 0), dtype=np.float64), np.empty(0, dtype=np.uint64))

    def validate(self) -> None:
        if self.ids.shape != (self.count,):
            raise ValueError(f"ids length {self.ids.shape} does not match count {self.count}")
        if self.count and not np.isfinite(self.coords).all():
            raise ValueError("non-finite coordinate admitted to PointSet")
        if len(np.unique(self.ids)) != self.count:
            raise ValueError("duplicate point ids within one PointSet")

    def point(self, i: int) -> np.ndarray:
        """Coordinate vector of point i (a copy, shape (dims,))."""
        return np.ascontiguousarray(self.coords[:, i])

    def rows(self) -> np.ndarray:
        """All points as an (count, dims) row-major array (copy)."""
        return np.ascontiguousarray(self.coords.T)

    def take(self, idx: np.ndarray) -> "PointSet":
        """Gather a new PointSet from position indices (not ids)."""
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(np.ascontiguousarray(self.coords[:, idx]), self.ids[idx])

    @staticmethod
    def concat(parts: Iterable["PointSet"]) -> "PointSet":
        parts = list(parts)
        if not parts:
            raise ValueError("concat of zero PointSets")
        coords = np.concatenate([p.coords for p in parts], axis=1)
        ids = np.concatenate([p.ids for p in parts])
        return PointSet(np.ascontiguousarray(coords), ids)


class SplitPlane(NamedTuple):
    """Axis-aligned splitting hyperplane: (dimension index, split value).

    Points with coord[dim] < value go left; coord[dim] >= value go right
    (ties split right, everywhere in the engine).
    """

    dim: int
    value: float


@dataclass(frozen=True, eq=False)
class Region:
    """Axis-aligned box, possibly unbounded (+-inf faces allowed)."""

    lower: np.ndarray
    upper: np.ndarray

    @staticmethod
    def unbounded(dims: int) -> "Region":
        return Region(np.full(dims, -np.inf), np.full(dims, np.inf))

    @property
    def dims(self) -> int:
        return self.lower.shape[0]

    def contains(self, q: np.ndarray) -> bool:
        return bool(np.all(self.lower <= q) and np.all(q <= self.upper))

    def split(self, plane: SplitPlane) -> tuple["Region", "Region"]:
        """Halve along a plane; returns (low side, high side)."""
        low_upper = self.upper.copy()
        low_upper[plane.dim] = plane.value
        high_lower = self.lower.copy()
        high_lower[plane.dim] = plane.value
        return Region(self.lower, low_upper), Region(high_lower, self.upper)


class Neighbor(NamedTuple):
    """One candidate neighbor: squared distance, point id, owning rank."""

    sq_dist: float
    point_id: int
    rank: int


@dataclass(frozen=True)
class KnnResult:
    """Result for one query: up to k neighbors plus the pruning bound.

    ``neighbors`` is sorted ascending by (sq_dist, point_id). ``r_prime`` is
    the squared distance of the k-th neighbor when the result is full, else
    +inf; it is the radius forwarded to remote ranks.
    """

    query_id: int
    neighbors: tuple[Neighbor, ...]
    r_prime: float

    @staticmethod
    def from_sorted(query_id: int, sq_dists: np.ndarray, point_ids: np.ndarray,
                    ranks: np.ndarray, k: int) -> "KnnResult":
        neighbors = tuple(
            Neighbor(float(d), int(p), int(r))
            for d, p, r in zip(sq_dists, point_ids, ranks)
        )
        r_prime = float(sq_dists[k - 1]) if len(neighbors) == k else float("inf")
        return KnnResult(query_id, neighbors, r_prime)

    def check(self, k: int, total_in_scope: int | None = None) -> None:
        """Assert the type invariants (test helper)."""
        ns = self.neighbors
        if total_in_scope is not None and len(ns) != min(k, total_in_scope):
            raise AssertionError(f"expected {min(k, total_in_scope)} neighbors, got {len(ns)}")
        keys = [(n.sq_dist, n.point_id) for n in ns]
        if keys != sorted(keys):
            raise AssertionError("neighbors not sorted by (sq_dist, point_id)")
        if len({n.point_id for n in ns}) != len(ns):
            raise AssertionError("duplicate point_id in result")
        for n in ns:
            if not (n.sq_dist >= 0.0 and np.isfinite(n.sq_dist)):
                raise AssertionError("sq_dist must be finite and nonnegative")
        if len(ns) == k:
            if self.r_prime != ns[-1].sq_dist:
                raise AssertionError("r_prime must equal the k-th squared distance")
        elif self.r_prime != float("inf"):
            raise AssertionError("r_prime must be +inf while the result is not full")


def squared_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance, accumulated dimension by dimension.

    The accumulation order (ascending dimension) is part of the contract:
    the tree engine and the brute-force oracle use the same order so their
    distances are bit-identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimensionality mismatch: {a.shape} vs {b.shape}")
    s = 0.0
    for d in range(a.shape[0]):
        diff = float(a[d]) - float(b[d])
        s += diff * diff
    return s


def sq_dists_to_columns(coords: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from q to every column of a (dims, n) array.

    Vectorized over points but accumulated dimension by dimension, matching
    squared_distance and the leaf-scan kernels bit for bit.
    """
    n = coords.shape[1]
    acc = np.zeros(n, dtype=np.float64)
    for d in range(coords.shape[0]):
        diff = coords[d] - q[d]
        acc += diff * diff
    return acc


def min_sq_dist_to_region(q: np.ndarray, region: Region) -> float:
    """Squared distance from q to the nearest point of the box (0 if inside)."""
    s = 0.0
    for d in range(region.dims):
        qd = float(q[d])
        off = 0.0
        lo = float(region.lower[d])
        hi = float(region.upper[d])
        if qd < lo:
            off = lo - qd
        elif qd > hi:
            off = qd - hi
        s += off * off
    return s
