"""Approximate median selection from sampled, non-uniform histograms.

The split point of every tree node (both tiers) comes from here: sample a
small set of values, use the sorted distinct samples as histogram bin
boundaries, histogram the full population, and pick the boundary whose
cumulative fraction is closest to 50%.

Bin convention: value v belongs to bin b iff boundaries[b-1] <= v < boundaries[b]
(open-ended at both ends), i.e. locate_bin(v) == number of boundaries <= v.

Bin location uses a two-level linear scan instead of binary search: every
32nd boundary is pulled into a stride array; a scan of the stride array finds
the enclosing 32-wide block, then that block is scanned. Both scans run over
contiguous memory. The result is required (and tested) to equal binary search
on every input.

Sampling uses a SplitMix64 generator so the identical sampler is callable
from inside nopython tree-construction kernels; fixed (values, m, seed)
always yields the same draw.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "STRIDE",
    "IntervalSet",
    "Histogram",
    "sample_values",
    "build_intervals",
    "locate_bin",
    "histogram_values",
    "approximate_median",
    "derive_seed",
]

STRIDE = 32

# Fixed chunk grid for cooperative histogramming; independent of worker count
# so partial-count merges are bit-stable.
_CHUNK = 1 << 16

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True, nogil=True)
def _mix64(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _rng_next(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    z = state
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def _node_seed(seed, path, salt):
    return _mix64(seed ^ _mix64(path) ^ _mix64(salt * np.uint64(0x9E3779B97F4A7C15)))


@njit(cache=True, nogil=True)
def _sample_indices(n, m, seed):
    """m distinct indices from [0, n) via partial Fisher-Yates; m <= n."""
    idx = np.arange(n, dtype=np.int64)
    state = seed
    for j in range(m):
        state, z = _rng_next(state)
        r = j + np.int64(z % np.uint64(n - j))
        tmp = idx[j]
        idx[j] = idx[r]
        idx[r] = tmp
    return idx[:m]


@njit(cache=True, nogil=True)
def _sample_from(values, m, seed):
    n = values.shape[0]
    take = m if m < n else n
    picked = _sample_indices(n, take, seed)
    out = np.empty(take, dtype=np.float64)
    for j in range(take):
        out[j] = values[picked[j]]
    return out


@njit(cache=True, nogil=True)
def _locate(boundaries, strides, v):
    ns = strides.shape[0]
    c = 0
    for j in range(ns):
        if strides[j] <= v:
            c += 1
    if c == 0:
        return np.int64(0)
    base = STRIDE * (c - 1)
    count = base + 1
    end = base + STRIDE + 1
    nb = boundaries.shape[0]
    if end > nb:
        end = nb
    for i in range(base + 1, end):
        if boundaries[i] <= v:
            count += 1
    return np.int64(count)


@njit(cache=True, nogil=True)
def _locate_many(boundaries, strides, values):
    out = np.empty(values.shape[0], dtype=np.int64)
    for i in range(values.shape[0]):
        out[i] = _locate(boundaries, strides, values[i])
    return out


@njit(cache=True, nogil=True)
def _histogram(values, boundaries, strides, lo, hi):
    """Bin counts plus, per boundary, the count of exactly-equal values."""
    nb = boundaries.shape[0]
    counts = np.zeros(nb + 1, dtype=np.int64)
    equals = np.zeros(nb, dtype=np.int64)
    for i in range(lo, hi):
        v = values[i]
        b = _locate(boundaries, strides, v)
        counts[b] += 1
        if b > 0 and boundaries[b - 1] == v:
            equals[b - 1] += 1
    return counts, equals


@njit(cache=True, nogil=True)
def _select_median(boundaries, counts):
    """Boundary index with cumulative fraction closest to 0.5 (ties low).

    Returns (index, count_below); index -1 when the histogram is empty.
    """
    nb = boundaries.shape[0]
    total = np.int64(0)
    for b in range(counts.shape[0]):
        total += counts[b]
    if total <= 0 or nb == 0:
        return np.int64(-1), np.int64(0)
    best = np.int64(-1)
    best_diff = np.inf
    cum = np.int64(0)
    best_below = np.int64(0)
    for i in range(nb):
        cum += counts[i]
        diff = abs(cum / total - 0.5)
        if diff < best_diff:
            best_diff = diff
            best = i
            best_below = cum
    return best, best_below


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Sorted distinct sample values plus every 32nd of them."""

    boundaries: np.ndarray
    stride_index: np.ndarray

    @property
    def size(self) -> int:
        return self.boundaries.shape[0]


@dataclass(frozen=True, eq=False)
class Histogram:
    """Per-bin counts; len(counts) == len(boundaries) + 1."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def derive_seed(seed: int, path: int, salt: int) -> np.uint64:
    """Deterministic per-node sub-seed; u64 wraparound on all inputs."""
    return _node_seed(
        np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
        np.uint64(path & 0xFFFFFFFFFFFFFFFF),
        np.uint64(salt & 0xFFFFFFFFFFFFFFFF),
    )


def sample_values(values: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Draw min(m, len(values)) values uniformly without replacement.

    Deterministic for fixed (values, m, seed); empty input yields an empty
    array.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    return _sample_from(values, np.int64(m), np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def build_intervals(samples: np.ndarray) -> IntervalSet:
    """Sort samples, collapse duplicates, extract the stride array."""
    boundaries = np.unique(np.asarray(samples, dtype=np.float64))
    stride_index = np.ascontiguousarray(boundaries[::STRIDE])
    return IntervalSet(boundaries, stride_index)


def locate_bin(intervals: IntervalSet, v: float) -> int:
    """Bin index of v under the boundary convention (strided two-level scan)."""
    if intervals.size == 0:
        raise ValueError("locate_bin on empty IntervalSet")
    return int(_locate(intervals.boundaries, intervals.stride_index, float(v)))


def histogram_values(values: np.ndarray, intervals: IntervalSet, workers: int = 1) -> Histogram:
    """Histogram values against the interval boundaries.

    Workers > 1 split the input on a fixed chunk grid and merge partial
    counts by summation; the result is identical for any worker count and
    any input permutation of equal content.
    """
    if intervals.size == 0:
        raise ValueError("histogram over empty IntervalSet")
    values = np.ascontiguousarray(values, dtype=np.float64)
    counts, _ = _histogram_chunked(values, intervals, workers)
    return Histogram(counts)


def histogram_with_equals(values: np.ndarray, intervals: IntervalSet, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Like histogram_values but also returns per-boundary exact-equal counts
    (needed by the distributed split fallback)."""
    if intervals.size == 0:
        raise ValueError("histogram over empty IntervalSet")
    values = np.ascontiguousarray(values, dtype=np.float64)
    return _histogram_chunked(values, intervals, workers)


def _histogram_chunked(values: np.ndarray, intervals: IntervalSet, workers: int) -> tuple[np.ndarray, np.ndarray]:
    n = values.shape[0]
    b, s = intervals.boundaries, intervals.stride_index
    if workers <= 1 or n <= _CHUNK:
        return _histogram(values, b, s, 0, n)
    spans = [(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda sp: _histogram(values, b, s, sp[0], sp[1]), spans))
    counts = np.zeros(intervals.size + 1, dtype=np.int64)
    equals = np.zeros(intervals.size, dtype=np.int64)
    for c, e in parts:
        counts += c
        equals += e
    return counts, equals


def approximate_median(intervals: IntervalSet, histogram: Histogram) -> float:
    """The boundary whose cumulative count fraction is closest to 0.5.

    Ties go to the lower boundary. Raises on an empty histogram, which
    signals a degenerate split to the caller.
    """
    idx, _ = _select_median(intervals.boundaries, histogram.counts)
    if idx < 0:
        raise ValueError("approximate_median of empty histogram (degenerate split)")
    return float(intervals.boundaries[idx])
