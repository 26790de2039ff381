"""Per-rank kd-tree construction over columnar points.

Construction runs in two stages: the top levels proceed breadth-first with
all workers cooperating on each node's partition (data parallelism); once the
frontier holds at least workers * branch_factor_per_worker subtrees, each
worker builds whole subtrees depth-first. A final pass packs each leaf bucket
into a contiguous coordinate range and renumbers nodes into preorder, so the
finished tree is byte-identical for any worker count.

Split choice per node: the dimension with maximum sample variance, split at
the sampled-histogram approximate median. Degenerate splits fall back to the
best exact split along the dimension, then to the next dimension by variance;
a node whose points are identical in every dimension becomes an oversized
degenerate leaf.

Ties at the split value always go right (coord[dim] >= value).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import PointSet, SplitPlane
from .median import STRIDE, _histogram, _node_seed, _sample_from, _sample_indices, _select_median

__all__ = [
    "BuildConfig",
    "LocalTree",
    "build_local_tree",
    "choose_split_dimension",
    "partition_indices",
    "pack_buckets",
]

_CHUNK = 1 << 16
_MASK = 0xFFFFFFFFFFFFFFFF

# salts for per-node sub-draws: variance sample, then median sample per dim
_SALT_VARIANCE = 0
_SALT_MEDIAN_BASE = 1


@dataclass(frozen=True)
class BuildConfig:
    """Knobs for local tree construction (defaults match the engine's tuning:
    32-point buckets, 1024-value samples, thread switch at workers x 10)."""

    bucket_size: int = 32
    local_sample_m: int = 1024
    variance_sample: int = 1024
    branch_factor_per_worker: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")
        if self.local_sample_m < 1 or self.variance_sample < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.branch_factor_per_worker < 1:
            raise ValueError("branch_factor_per_worker must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True, eq=False)
class LocalTree:
    """Flat-array kd-tree with packed leaf buckets.

    node_dim[i] >= 0 marks an interior node with plane (node_dim, node_value)
    and children node_left/node_right; node_dim[i] == -1 marks a leaf whose
    bucket occupies packed rows [node_left, node_left + node_right).
    node_count holds the subtree point count. Nodes are stored in preorder.
    """

    node_dim: np.ndarray
    node_value: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_count: np.ndarray
    points: PointSet
    depth: int
    leaf_starts: np.ndarray
    leaf_lengths: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.node_dim.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.leaf_starts.shape[0]

    @property
    def count(self) -> int:
        return self.points.count

    @property
    def dims(self) -> int:
        return self.points.dims

    def plane(self, node: int) -> SplitPlane:
        return SplitPlane(int(self.node_dim[node]), float(self.node_value[node]))


@njit(cache=True, nogil=True)
def _dim_ssd(coords, idx, start, end, sample, seed):
    """Per-dimension sum of squared deviations over a sampled subset.

    Sequential accumulation so the result is independent of worker count.
    """
    ndim = coords.shape[0]
    n = end - start
    take = sample if sample < n else n
    picked = _sample_indices(n, take, seed)
    ssd = np.empty(ndim, dtype=np.float64)
    for d in range(ndim):
        mean = 0.0
        for j in range(take):
            mean += coords[d, idx[start + picked[j]]]
        mean /= take
        s = 0.0
        for j in range(take):
            diff = coords[d, idx[start + picked[j]]] - mean
            s += diff * diff
        ssd[d] = s
    return ssd


@njit(cache=True, nogil=True)
def _choose_split(coords, idx, start, end, path, seed, variance_sample, median_m):
    """Pick (dim, value) for one node; returns (status, dim, value).

    status 0: valid split (both sides nonempty). status 1: degenerate leaf
    (every dimension constant across the node).
    """
    n = end - start
    vseed = _node_seed(seed, path, np.uint64(_SALT_VARIANCE))
    ssd = _dim_ssd(coords, idx, start, end, variance_sample, vseed)
    order = np.argsort(-ssd, kind="mergesort")

    values = np.empty(n, dtype=np.float64)
    for t in range(order.shape[0]):
        d = order[t]
        for i in range(n):
            values[i] = coords[d, idx[start + i]]

        mseed = _node_seed(seed, path, np.uint64(_SALT_MEDIAN_BASE + d))
        samp = _sample_from(values, median_m, mseed)
        boundaries = np.unique(samp)
        strides = np.ascontiguousarray(boundaries[::STRIDE])
        counts, _ = _histogram(values, boundaries, strides, 0, n)
        bi, below = _select_median(boundaries, counts)
        if bi >= 0 and 0 < below < n:
            return np.int64(0), np.int64(d), boundaries[bi]

        # approximate median failed to separate: best exact split (distinct
        # value with below-count closest to n/2, minimum value excluded)
        sv = np.sort(values)
        half = n * 0.5
        found = False
        best_diff = 0.0
        best_val = 0.0
        for i in range(1, n):
            if sv[i] != sv[i - 1]:
                diff = abs(i - half)
                if not found or diff < best_diff:
                    found = True
                    best_diff = diff
                    best_val = sv[i]
        if found:
            return np.int64(0), np.int64(d), best_val
        # dimension constant: try the next one

    return np.int64(1), np.int64(-1), 0.0


@njit(cache=True, nogil=True)
def _partition_stable(coords, idx, start, end, dim, value, scratch):
    """Stable in-place partition of idx[start:end): coord < value first.

    Returns the left-side count. Stability makes the result canonical, so
    serial and chunked-parallel partitions agree exactly.
    """
    nl = 0
    for i in range(start, end):
        if coords[dim, idx[i]] < value:
            nl += 1
    li = 0
    ri = nl
    for i in range(start, end):
        j = idx[i]
        if coords[dim, j] < value:
            scratch[li] = j
            li += 1
        else:
            scratch[ri] = j
            ri += 1
    for i in range(start, end):
        idx[i] = scratch[i - start]
    return np.int64(nl)


@njit(cache=True, nogil=True)
def _count_left(coords, idx, lo, hi, dim, value):
    nl = 0
    for i in range(lo, hi):
        if coords[dim, idx[i]] < value:
            nl += 1
    return np.int64(nl)


@njit(cache=True, nogil=True)
def _scatter_chunk(coords, idx, lo, hi, dim, value, out, lpos, rpos):
    for i in range(lo, hi):
        j = idx[i]
        if coords[dim, j] < value:
            out[lpos] = j
            lpos += 1
        else:
            out[rpos] = j
            rpos += 1


@njit(cache=True, nogil=True)
def _copy_back(idx, scratch, start, lo, hi):
    for i in range(lo, hi):
        idx[i] = scratch[i - start]


@njit(cache=True, nogil=True)
def _build_subtree(coords, idx, start0, end0, path0, depth0, seed,
                   bucket_size, variance_sample, median_m,
                   nd, nv, nl, nr, nc, scratch):
    """Depth-first construction of one whole subtree into preallocated
    node arrays (local numbering from 0). Returns (node count, max depth)."""
    size = end0 - start0
    cap = 2 * size + 2
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_path = np.empty(cap, dtype=np.uint64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_left = np.empty(cap, dtype=np.uint8)
    st_depth = np.empty(cap, dtype=np.int64)

    sp = 0
    st_start[sp] = start0
    st_end[sp] = end0
    st_path[sp] = path0
    st_parent[sp] = -1
    st_left[sp] = 0
    st_depth[sp] = depth0
    sp += 1

    cursor = np.int64(0)
    max_depth = depth0
    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        path = st_path[sp]
        parent = st_parent[sp]
        isleft = st_left[sp]
        depth = st_depth[sp]

        slot = cursor
        cursor += 1
        if parent >= 0:
            if isleft == 1:
                nl[parent] = slot
            else:
                nr[parent] = slot
        n = end - start
        nc[slot] = n
        if depth > max_depth:
            max_depth = depth

        make_leaf = n <= bucket_size
        dim = np.int64(-1)
        value = 0.0
        if not make_leaf:
            status, dim, value = _choose_split(
                coords, idx, start, end, path, seed, variance_sample, median_m)
            if status == 1:
                make_leaf = True
        if make_leaf:
            nd[slot] = -1
            nv[slot] = 0.0
            nl[slot] = start
            nr[slot] = n
            continue

        nleft = _partition_stable(coords, idx, start, end, dim, value, scratch[: n])
        nd[slot] = dim
        nv[slot] = value
        # right pushed first so the left child is processed (and numbered) first
        st_start[sp] = start + nleft
        st_end[sp] = end
        st_path[sp] = (path * np.uint64(2)) + np.uint64(1)
        st_parent[sp] = slot
        st_left[sp] = 0
        st_depth[sp] = depth + 1
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nleft
        st_path[sp] = path * np.uint64(2)
        st_parent[sp] = slot
        st_left[sp] = 1
        st_depth[sp] = depth + 1
        sp += 1

    return cursor, max_depth


@njit(cache=True, nogil=True)
def _renumber_preorder(nd, nv, nl, nr, nc, root):
    """Copy node arrays into canonical preorder. Returns new arrays + depth."""
    n = nd.shape[0]
    od = np.empty(n, dtype=np.int32)
    ov = np.empty(n, dtype=np.float64)
    ol = np.empty(n, dtype=np.int32)
    orr = np.empty(n, dtype=np.int32)
    oc = np.empty(n, dtype=np.int64)

    st_old = np.empty(n + 1, dtype=np.int64)
    st_parent = np.empty(n + 1, dtype=np.int64)
    st_left = np.empty(n + 1, dtype=np.uint8)
    st_depth = np.empty(n + 1, dtype=np.int64)
    sp = 0
    st_old[sp] = root
    st_parent[sp] = -1
    st_left[sp] = 0
    st_depth[sp] = 0
    sp += 1
    cursor = 0
    depth = 0
    while sp > 0:
        sp -= 1
        old = st_old[sp]
        parent = st_parent[sp]
        isleft = st_left[sp]
        d = st_depth[sp]
        new = cursor
        cursor += 1
        if parent >= 0:
            if isleft == 1:
                ol[parent] = new
            else:
                orr[parent] = new
        if d > depth:
            depth = d
        od[new] = np.int32(nd[old])
        ov[new] = nv[old]
        oc[new] = nc[old]
        if nd[old] < 0:
            ol[new] = np.int32(nl[old])
            orr[new] = np.int32(nr[old])
        else:
            st_old[sp] = nr[old]
            st_parent[sp] = new
            st_left[sp] = 0
            st_depth[sp] = d + 1
            sp += 1
            st_old[sp] = nl[old]
            st_parent[sp] = new
            st_left[sp] = 1
            st_depth[sp] = d + 1
            sp += 1
    return od, ov, ol, orr, oc, depth


def choose_split_dimension(points: PointSet, sample: int, seed: int) -> int:
    """Dimension of maximum sample variance (ties to the lowest index)."""
    if points.count == 0:
        raise ValueError("choose_split_dimension of empty PointSet")
    idx = np.arange(points.count, dtype=np.int64)
    ssd = _dim_ssd(points.coords, idx, 0, points.count, np.int64(sample),
                   _node_seed(np.uint64(seed & _MASK), np.uint64(1), np.uint64(_SALT_VARIANCE)))
    return int(np.argsort(-ssd, kind="mergesort")[0])


def partition_indices(points: PointSet, idx: np.ndarray, start: int, end: int,
                      plane: SplitPlane) -> tuple[tuple[int, int], tuple[int, int]]:
    """Stable in-place partition of idx[start:end) around a plane.

    Returns ((left_start, left_end), (right_start, right_end)); points with
    coord[dim] < value on the left, coord[dim] >= value on the right.
    """
    if not 0 <= plane.dim < points.dims:
        raise ValueError(f"plane dim {plane.dim} out of range for {points.dims}-D points")
    scratch = np.empty(end - start, dtype=np.int64)
    nl = int(_partition_stable(points.coords, idx, np.int64(start), np.int64(end),
                               np.int64(plane.dim), np.float64(plane.value), scratch))
    return (start, start + nl), (start + nl, end)


def pack_buckets(points: PointSet, order: np.ndarray) -> PointSet:
    """Columnar reorder of points by a bucket-contiguous permutation."""
    order = np.asarray(order, dtype=np.int64)
    return PointSet(np.ascontiguousarray(points.coords[:, order]), points.ids[order])


def _partition_range(coords, idx, start, end, dim, value, pool, workers, scratch):
    """Partition one node's index range, chunk-parallel when large.

    The chunk grid is fixed (size _CHUNK relative to the node start), so the
    stable result is identical for every worker count.
    """
    n = end - start
    if pool is None or workers <= 1 or n < 2 * _CHUNK:
        return int(_partition_stable(coords, idx, start, end, dim, value, scratch[:n]))
    spans = [(lo, min(lo + _CHUNK, end)) for lo in range(start, end, _CHUNK)]
    counts = list(pool.map(
        lambda sp: int(_count_left(coords, idx, sp[0], sp[1], dim, value)), spans))
    total_left = sum(counts)
    out = scratch[:n]
    jobs = []
    lpos = 0
    rpos = total_left
    for (lo, hi), c in zip(spans, counts):
        jobs.append((lo, hi, lpos, rpos))
        lpos += c
        rpos += (hi - lo) - c
    list(pool.map(
        lambda j: _scatter_chunk(coords, idx, j[0], j[1], dim, value, out, j[2], j[3]), jobs))
    copy_spans = [(lo, min(lo + _CHUNK, end)) for lo in range(start, end, _CHUNK)]
    list(pool.map(lambda sp: _copy_back(idx, out, start, sp[0], sp[1]), copy_spans))
    return total_left


def build_local_tree(points: PointSet, cfg: BuildConfig,
                     timings: dict | None = None) -> LocalTree:
    """Build a packed local kd-tree; identical output for any worker count.

    When given, ``timings`` receives the 'pack' phase seconds.
    """
    n = points.count
    if n == 0:
        empty32 = np.empty(0, dtype=np.int32)
        return LocalTree(empty32, np.empty(0), empty32.copy(), empty32.copy(),
                         np.empty(0, dtype=np.int64), points, 0,
                         np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    coords = points.coords
    idx = np.arange(n, dtype=np.int64)
    seed = np.uint64(cfg.seed & _MASK)
    scratch = np.empty(n, dtype=np.int64)
    threshold = cfg.workers * cfg.branch_factor_per_worker

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        # breadth-first stage: grow-lists of node fields, children linked by
        # intermediate ids; frontier entries carry (start, end, path, depth)
        b_dim: list[int] = []
        b_val: list[float] = []
        b_left: list[int] = []
        b_right: list[int] = []
        b_count: list[int] = []

        frontier = [(0, n, 1, 0, -1, 0)]  # start, end, path, depth, parent, is_left
        while frontier and len(frontier) < threshold:
            next_frontier = []
            for start, end, path, depth, parent, is_left in frontier:
                slot = len(b_dim)
                if parent >= 0:
                    if is_left:
                        b_left[parent] = slot
                    else:
                        b_right[parent] = slot
                size = end - start
                make_leaf = size <= cfg.bucket_size
                dim, value = -1, 0.0
                if not make_leaf:
                    status, dim, value = _choose_split(
                        coords, idx, np.int64(start), np.int64(end), np.uint64(path),
                        seed, np.int64(cfg.variance_sample), np.int64(cfg.local_sample_m))
                    if status == 1:
                        make_leaf = True
                if make_leaf:
                    b_dim.append(-1)
                    b_val.append(0.0)
                    b_left.append(start)
                    b_right.append(size)
                    b_count.append(size)
                    continue
                nleft = _partition_range(coords, idx, start, end, int(dim), float(value),
                                         pool, cfg.workers, scratch)
                b_dim.append(int(dim))
                b_val.append(float(value))
                b_left.append(-1)
                b_right.append(-1)
                b_count.append(size)
                next_frontier.append((start, start + nleft, (2 * path) & _MASK, depth + 1, slot, 1))
                next_frontier.append((start + nleft, end, (2 * path + 1) & _MASK, depth + 1, slot, 0))
            frontier = next_frontier

        n_bf = len(b_dim)

        # depth-first stage: one task per frontier subtree
        def run_task(task):
            start, end, path, depth, _parent, _is_left = task
            size = end - start
            cap = 2 * size + 1
            nd = np.empty(cap, dtype=np.int64)
            nv = np.empty(cap, dtype=np.float64)
            nlc = np.empty(cap, dtype=np.int64)
            nrc = np.empty(cap, dtype=np.int64)
            ncc = np.empty(cap, dtype=np.int64)
            tscratch = np.empty(size, dtype=np.int64)
            used, maxd = _build_subtree(
                coords, idx, np.int64(start), np.int64(end), np.uint64(path),
                np.int64(depth), seed, np.int64(cfg.bucket_size),
                np.int64(cfg.variance_sample), np.int64(cfg.local_sample_m),
                nd, nv, nlc, nrc, ncc, tscratch)
            return nd[:used], nv[:used], nlc[:used], nrc[:used], ncc[:used], int(maxd)

        if frontier:
            if pool is not None:
                results = list(pool.map(run_task, frontier))
            else:
                results = [run_task(t) for t in frontier]
        else:
            results = []

        # stitch: BF nodes first, then task blocks in frontier order
        all_dim = [np.asarray(b_dim, dtype=np.int64)]
        all_val = [np.asarray(b_val, dtype=np.float64)]
        all_left = [np.asarray(b_left, dtype=np.int64)]
        all_right = [np.asarray(b_right, dtype=np.int64)]
        all_count = [np.asarray(b_count, dtype=np.int64)]
        offset = n_bf
        for task, (nd, nv, nlc, nrc, ncc, _maxd) in zip(frontier, results):
            _start, _end, _path, _depth, parent, is_left = task
            if parent >= 0:
                if is_left:
                    all_left[0][parent] = offset
                else:
                    all_right[0][parent] = offset
            shift = nd >= 0  # interior nodes carry child pointers
            nlc = nlc.copy()
            nrc = nrc.copy()
            nlc[shift] += offset
            nrc[shift] += offset
            all_dim.append(nd)
            all_val.append(nv)
            all_left.append(nlc)
            all_right.append(nrc)
            all_count.append(ncc)
            offset += nd.shape[0]

        nd = np.concatenate(all_dim)
        nv = np.concatenate(all_val)
        nlc = np.concatenate(all_left)
        nrc = np.concatenate(all_right)
        ncc = np.concatenate(all_count)

        od, ov, ol, orr, oc, depth = _renumber_preorder(nd, nv, nlc, nrc, ncc, np.int64(0))

        t_pack = time.perf_counter()
        packed = pack_buckets(points, idx)
        if timings is not None:
            timings["pack"] = time.perf_counter() - t_pack
        leaf_mask = od < 0
        leaf_starts = ol[leaf_mask].astype(np.int64)
        leaf_lengths = orr[leaf_mask].astype(np.int64)
        return LocalTree(od, ov, ol, orr, oc, packed, int(depth), leaf_starts, leaf_lengths)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
