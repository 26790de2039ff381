"""Shared test helpers: brute-force oracles and tree introspection."""

import numpy as np

from kdknn.core import PointSet, sq_dists_to_columns


def oracle_topk(points: PointSet, q, k, sq_r=None):
    """Linear-scan oracle: top-k by (sq_dist, point_id), optional strict
    radius filter. Independent of the tree traversal path."""
    q = np.asarray(q, dtype=np.float64)
    dists = sq_dists_to_columns(points.coords, q)
    ids = points.ids
    if sq_r is not None and np.isfinite(sq_r):
        mask = dists < sq_r
        dists, ids = dists[mask], ids[mask]
    order = np.lexsort((ids, dists))[:k]
    return dists[order], ids[order]


def naive_pairwise_topk(points: PointSet, q, k, sq_r=None):
    """Second, deliberately naive oracle (pure-Python loops) used to
    cross-check the numpy oracle."""
    cand = []
    for i in range(points.count):
        s = 0.0
        for d in range(points.dims):
            diff = points.coords[d, i] - q[d]
            s += diff * diff
        if sq_r is None or s < sq_r:
            cand.append((s, int(points.ids[i])))
    cand.sort()
    return cand[:k]


def tree_subtree_ranges(tree):
    """Packed row range per node; asserts children tile their parent."""
    ranges = {}

    def visit(node):
        if tree.node_dim[node] < 0:
            s, ln = int(tree.node_left[node]), int(tree.node_right[node])
            ranges[node] = (s, s + ln)
            return ranges[node]
        ls, le = visit(int(tree.node_left[node]))
        rs, re = visit(int(tree.node_right[node]))
        assert le == rs
        ranges[node] = (ls, re)
        return ranges[node]

    if tree.n_nodes:
        visit(0)
    return ranges
