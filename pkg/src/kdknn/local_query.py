"""Exact k-nearest-neighbor search over one local tree.

Stack-based traversal: pop (node, bound); interior nodes are pruned when
bound >= r', otherwise the far child is pushed with an updated bound and the
near child is pushed last so it is processed first. Leaf buckets are scanned
exhaustively over the packed columns, distances accumulated dimension by
dimension (bit-compatible with the brute-force oracle).

The bound carried on the stack is maintained from a per-dimension offset
vector: descending into a far child replaces that dimension's offset and
updates the squared bound incrementally (old_bound - old_off^2 + new_off^2).
This stays a true lower bound even when one dimension is split twice on a
path, where naive accumulation would overestimate and break exactness.

A bounded max-heap of (sq_dist, point_id) tracks the best k; comparisons are
lexicographic so distance ties resolve to the smaller point id, matching the
oracle's tie rule. r' is the heap's max distance once full; candidate points
are admitted strictly below it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit

from .core import KnnResult
from .local_tree import LocalTree

__all__ = ["find_knn", "find_knn_batch", "count_visited"]

_QCHUNK = 512  # queries per kernel call; fixed so slicing is worker-invariant


@njit(cache=True, nogil=True)
def _heap_push(hd, hid, hsize, d, pid):
    i = hsize
    hd[i] = d
    hid[i] = pid
    while i > 0:
        p = (i - 1) // 2
        if hd[p] < hd[i] or (hd[p] == hd[i] and hid[p] < hid[i]):
            hd[p], hd[i] = hd[i], hd[p]
            hid[p], hid[i] = hid[i], hid[p]
            i = p
        else:
            break
    return hsize + 1


@njit(cache=True, nogil=True)
def _heap_replace_root(hd, hid, hsize, d, pid):
    hd[0] = d
    hid[0] = pid
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        big = i
        if l < hsize and (hd[l] > hd[big] or (hd[l] == hd[big] and hid[l] > hid[big])):
            big = l
        if r < hsize and (hd[r] > hd[big] or (hd[r] == hd[big] and hid[r] > hid[big])):
            big = r
        if big == i:
            break
        hd[big], hd[i] = hd[i], hd[big]
        hid[big], hid[i] = hid[i], hid[big]
        i = big


@njit(cache=True, nogil=True)
def _knn_kernel(node_dim, node_value, node_left, node_right,
                coords, ids, depth,
                queries, k, radii,
                out_dists, out_ids, out_counts, out_counters,
                qlo, qhi):
    """Process queries[qlo:qhi); outputs per-query sorted neighbors plus
    (nodes visited, buckets scanned, points compared) counter rows."""
    ndim = coords.shape[0]
    cap = depth + 2
    st_node = np.empty(cap, dtype=np.int64)
    st_bound = np.empty(cap, dtype=np.float64)
    st_off = np.empty((cap, ndim), dtype=np.float64)
    cur_off = np.empty(ndim, dtype=np.float64)
    hd = np.empty(k, dtype=np.float64)
    hid = np.empty(k, dtype=np.uint64)

    for qi in range(qlo, qhi):
        out_counters[qi, 0] = 0
        out_counters[qi, 1] = 0
        out_counters[qi, 2] = 0
        if node_dim.shape[0] == 0:
            out_counts[qi] = 0
            continue
        q = queries[qi]
        r_prime = radii[qi]
        hsize = 0
        sp = 0
        st_node[sp] = 0
        st_bound[sp] = 0.0
        for d in range(ndim):
            st_off[sp, d] = 0.0
        sp += 1

        while sp > 0:
            sp -= 1
            node = st_node[sp]
            bound = st_bound[sp]
            for d in range(ndim):
                cur_off[d] = st_off[sp, d]
            out_counters[qi, 0] += 1

            dim = node_dim[node]
            if dim < 0:
                start = node_left[node]
                length = node_right[node]
                out_counters[qi, 1] += 1
                out_counters[qi, 2] += length
                for i in range(start, start + length):
                    dist = 0.0
                    for d in range(ndim):
                        diff = coords[d, i] - q[d]
                        dist += diff * diff
                    if hsize < k:
                        if dist < r_prime:
                            hsize = _heap_push(hd, hid, hsize, dist, ids[i])
                            if hsize == k:
                                r_prime = hd[0]
                    else:
                        if dist < hd[0] or (dist == hd[0] and ids[i] < hid[0]):
                            _heap_replace_root(hd, hid, hsize, dist, ids[i])
                            r_prime = hd[0]
                continue

            if bound >= r_prime:
                continue
            v = node_value[node]
            qd = q[dim]
            new_off = qd - v
            if qd < v:
                near = node_left[node]
                far = node_right[node]
            else:
                near = node_right[node]
                far = node_left[node]
            old_off = cur_off[dim]
            far_bound = bound - old_off * old_off + new_off * new_off
            if far_bound < r_prime:
                st_node[sp] = far
                st_bound[sp] = far_bound
                for d in range(ndim):
                    st_off[sp, d] = cur_off[d]
                st_off[sp, dim] = new_off
                sp += 1
            st_node[sp] = near
            st_bound[sp] = bound
            for d in range(ndim):
                st_off[sp, d] = cur_off[d]
            sp += 1

        # drain the heap max-first into the tail -> ascending (dist, id)
        out_counts[qi] = hsize
        j = hsize
        while hsize > 0:
            j -= 1
            out_dists[qi, j] = hd[0]
            out_ids[qi, j] = hid[0]
            hsize -= 1
            if hsize > 0:
                _heap_replace_root(hd, hid, hsize, hd[hsize], hid[hsize])
    return 0


def find_knn_batch(tree: LocalTree, queries: np.ndarray, k: int,
                   radii: np.ndarray | float = np.inf,
                   workers: int = 1,
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact KNN for a block of queries against one tree.

    Returns (dists (nq,k), ids (nq,k), counts (nq,), counters (nq,3)); row i
    holds counts[i] valid entries sorted ascending by (sq_dist, point_id).
    ``radii`` is a scalar or per-query array of squared search radii; only
    points strictly inside count.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be (nq, dims)")
    nq = queries.shape[0]
    if tree.count and queries.shape[1] != tree.dims:
        raise ValueError(f"query dims {queries.shape[1]} != tree dims {tree.dims}")
    if np.isscalar(radii):
        radii = np.full(nq, float(radii))
    else:
        radii = np.ascontiguousarray(radii, dtype=np.float64)

    out_dists = np.empty((nq, k), dtype=np.float64)
    out_ids = np.empty((nq, k), dtype=np.uint64)
    out_counts = np.zeros(nq, dtype=np.int64)
    out_counters = np.zeros((nq, 3), dtype=np.int64)
    if nq == 0:
        return out_dists, out_ids, out_counts, out_counters

    args = (tree.node_dim, tree.node_value, tree.node_left, tree.node_right,
            tree.points.coords, tree.points.ids, np.int64(tree.depth),
            queries, np.int64(k), radii,
            out_dists, out_ids, out_counts, out_counters)
    if workers <= 1 or nq <= _QCHUNK:
        _knn_kernel(*args, np.int64(0), np.int64(nq))
    else:
        spans = [(lo, min(lo + _QCHUNK, nq)) for lo in range(0, nq, _QCHUNK)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda sp: _knn_kernel(*args, np.int64(sp[0]), np.int64(sp[1])), spans))
    return out_dists, out_ids, out_counts, out_counters


def find_knn(tree: LocalTree, q: np.ndarray, k: int, sq_radius: float = np.inf,
             query_id: int = 0, rank: int = 0) -> KnnResult:
    """Algorithm entry point for a single query; see find_knn_batch."""
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    dists, ids, counts, _ = find_knn_batch(tree, q, k, sq_radius)
    c = int(counts[0])
    ranks = np.full(c, rank, dtype=np.int64)
    return KnnResult.from_sorted(query_id, dists[0, :c], ids[0, :c], ranks, k)


def count_visited(tree: LocalTree, q: np.ndarray, k: int, sq_radius: float = np.inf) -> dict:
    """Traversal counters for one query: identical walk to find_knn."""
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    _, _, _, counters = find_knn_batch(tree, q, k, sq_radius)
    return {
        "nodes_visited": int(counters[0, 0]),
        "buckets_scanned": int(counters[0, 1]),
        "points_compared": int(counters[0, 2]),
    }
