"""Global spatial partition across simulated ranks.

The global tree has log2(P) levels. At each level every rank group agrees on
a split plane collectively: each rank samples points and all-gathers them,
the sample's max-variance dimension is chosen, the distinct sampled values
along it become histogram boundaries, per-rank histograms of the *full*
local data are sum-reduced, and every rank deterministically selects the
boundary whose cumulative fraction is closest to 50%. Points are then
exchanged so the lower half of the group holds coord < split and the upper
half coord >= split, balanced to within one point per rank.

Degenerate splits fall back to inclusive-count candidates (splitting just
above a boundary) and then to the next dimension by variance; a group of two
or more identical points is unsplittable and aborts with diagnostics. Groups
holding fewer than two points split trivially (one side may be empty).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from . import wire
from .core import PointSet, Region, SplitPlane, min_sq_dist_to_region
from .local_tree import LocalTree
from .median import (
    Histogram,
    IntervalSet,
    STRIDE,
    _sample_indices,
    approximate_median,
    derive_seed,
    histogram_with_equals,
)
from .transport import Transport, run_ranks

__all__ = [
    "ClusterConfig",
    "GlobalTree",
    "RankState",
    "UnsplittableDataError",
    "build_global_tree",
    "choose_global_split_dimension",
    "redistribute",
    "owner_of",
    "ranks_within",
    "sample_points",
]

# seed-derivation tags for the global tier (distinct from local-tree paths)
_GLOBAL_PATH_TAG = 1 << 40
_SALT_GLOBAL_SAMPLE = 101


class UnsplittableDataError(RuntimeError):
    """A rank group holds >= 2 points that are identical in every dimension."""


@dataclass(frozen=True)
class ClusterConfig:
    global_sample_m: int = 256
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.global_sample_m < 1:
            raise ValueError("global_sample_m must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True, eq=False)
class GlobalTree:
    """Complete binary partition tree with P leaves, replicated on all ranks.

    Planes are stored in heap order (children of node i are 2i+1, 2i+2);
    leaf i maps to rank i. Descent uses the engine-wide tie rule: equal
    coordinates go right.
    """

    dims: int
    plane_dims: np.ndarray
    plane_values: np.ndarray

    @property
    def rank_count(self) -> int:
        return self.plane_dims.shape[0] + 1

    @property
    def levels(self) -> int:
        return self.rank_count.bit_length() - 1

    def owner_of(self, q: np.ndarray) -> int:
        idx = 0
        n_planes = self.plane_dims.shape[0]
        while idx < n_planes:
            d = self.plane_dims[idx]
            bit = 0 if q[d] < self.plane_values[idx] else 1
            idx = 2 * idx + 1 + bit
        return idx - n_planes

    def owner_of_batch(self, queries: np.ndarray) -> np.ndarray:
        nq = queries.shape[0]
        idx = np.zeros(nq, dtype=np.int64)
        n_planes = self.plane_dims.shape[0]
        for _ in range(self.levels):
            d = self.plane_dims[idx]
            v = self.plane_values[idx]
            bit = (queries[np.arange(nq), d] >= v).astype(np.int64)
            idx = 2 * idx + 1 + bit
        return idx - n_planes

    def region_of(self, rank: int) -> Region:
        region = Region.unbounded(self.dims)
        idx = 0
        n_planes = self.plane_dims.shape[0]
        levels = self.levels
        for l in range(levels):
            bit = (rank >> (levels - 1 - l)) & 1
            plane = SplitPlane(int(self.plane_dims[idx]), float(self.plane_values[idx]))
            low, high = region.split(plane)
            region = high if bit else low
            idx = 2 * idx + 1 + bit
        assert idx - n_planes == rank or n_planes == 0
        return region

    def regions(self) -> list[Region]:
        return [self.region_of(r) for r in range(self.rank_count)]

    def ranks_within(self, q: np.ndarray, sq_radius: float) -> np.ndarray:
        """Ranks (owner excluded) whose region is strictly closer than the
        radius; pruned descent, exact against the all-regions check."""
        n_planes = self.plane_dims.shape[0]
        owner = self.owner_of(q)
        out: list[int] = []

        def descend(idx: int, region: Region) -> None:
            if min_sq_dist_to_region(q, region) >= sq_radius:
                return
            if idx >= n_planes:
                rank = idx - n_planes
                if rank != owner:
                    out.append(rank)
                return
            plane = SplitPlane(int(self.plane_dims[idx]), float(self.plane_values[idx]))
            low, high = region.split(plane)
            descend(2 * idx + 1, low)
            descend(2 * idx + 2, high)

        descend(0, Region.unbounded(self.dims))
        return np.asarray(sorted(out), dtype=np.int64)

    def to_bytes(self) -> bytes:
        head = struct.pack("<II", self.dims, self.rank_count)
        return (head
                + np.ascontiguousarray(self.plane_dims, dtype="<i4").tobytes()
                + np.ascontiguousarray(self.plane_values, dtype="<f8").tobytes())

    @staticmethod
    def from_bytes(blob: bytes) -> "GlobalTree":
        dims, p = struct.unpack_from("<II", blob, 0)
        off = 8
        pdim = np.frombuffer(blob, dtype="<i4", count=p - 1, offset=off).astype(np.int32)
        off += 4 * (p - 1)
        pval = np.frombuffer(blob, dtype="<f8", count=p - 1, offset=off).astype(np.float64)
        return GlobalTree(int(dims), pdim, pval)


@dataclass
class RankState:
    """Everything one rank holds after construction."""

    rank: int
    points: PointSet
    global_tree: GlobalTree
    tree: LocalTree | None = None


def owner_of(gt: GlobalTree, q: np.ndarray) -> int:
    return gt.owner_of(np.asarray(q, dtype=np.float64))


def ranks_within(gt: GlobalTree, q: np.ndarray, sq_radius: float) -> np.ndarray:
    return gt.ranks_within(np.asarray(q, dtype=np.float64), float(sq_radius))


def sample_points(pts: PointSet, m: int, seed: int) -> PointSet:
    """min(m, n) points drawn without replacement, deterministically."""
    n = pts.count
    if n == 0:
        return PointSet.empty(pts.dims)
    take = min(m, n)
    picked = _sample_indices(np.int64(n), np.int64(take), np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    return pts.take(np.asarray(picked))


def _group_of(rank: int, rank_count: int, level: int) -> tuple[int, ...]:
    g = rank_count >> level
    base = (rank // g) * g
    return tuple(range(base, base + g))


def _gather_group_sample(ep: Transport, group, pts: PointSet, cfg: ClusterConfig, level: int) -> np.ndarray:
    seed = derive_seed(cfg.seed, _GLOBAL_PATH_TAG + level, _SALT_GLOBAL_SAMPLE + ep.rank)
    sample = sample_points(pts, cfg.global_sample_m, int(seed))
    blobs = ep.group_all_gather(group, wire.KIND_POINTS, wire.encode_points(sample))
    parts = [wire.decode_points(b) for b in blobs]
    rows = [p.rows() for p in parts if p.count]
    if not rows:
        return np.empty((0, pts.dims), dtype=np.float64)
    return np.concatenate(rows, axis=0)


def choose_global_split_dimension(ep: Transport, group, pts: PointSet,
                                  cfg: ClusterConfig, level: int = 0) -> int:
    """Max-variance dimension of the group's all-gathered sample; every
    member returns the same answer."""
    sample_rows = _gather_group_sample(ep, group, pts, cfg, level)
    if sample_rows.shape[0] == 0:
        return 0
    ssd = np.var(sample_rows, axis=0)
    return int(np.argsort(-ssd, kind="mergesort")[0])


def _choose_group_plane(ep: Transport, group, pts: PointSet, cfg: ClusterConfig,
                        level: int) -> SplitPlane:
    sample_rows = _gather_group_sample(ep, group, pts, cfg, level)
    dims = pts.dims
    if sample_rows.shape[0] == 0:
        # empty group: any plane keeps regions well-formed
        ep.group_sum_reduce(group, wire.KIND_GATHER, np.zeros(1, dtype=np.int64))
        return SplitPlane(0, 0.0)
    ssd = np.var(sample_rows, axis=0)
    order = np.argsort(-ssd, kind="mergesort")

    group_n = None
    for d in order:
        d = int(d)
        boundaries = np.unique(sample_rows[:, d])
        iv = IntervalSet(boundaries, np.ascontiguousarray(boundaries[::STRIDE]))
        nb = boundaries.shape[0]
        local_vals = pts.coords[d] if pts.count else np.empty(0)
        counts, equals = histogram_with_equals(local_vals, iv, workers=cfg.workers)
        packed = np.concatenate([counts, equals, [pts.count]])
        reduced = ep.group_sum_reduce(group, wire.KIND_GATHER, packed)
        g_counts = reduced[:nb + 1]
        g_equals = reduced[nb + 1:2 * nb + 1]
        group_n = int(reduced[-1])
        if group_n == 0:
            return SplitPlane(0, 0.0)

        lt = np.cumsum(g_counts)[:nb]

        value = approximate_median(iv, Histogram(g_counts))
        below = int(lt[np.searchsorted(boundaries, value)])
        if group_n < 2 or 0 < below < group_n:
            return SplitPlane(d, float(value))

        # fallback: consider splitting at each boundary and just above it
        le = lt + g_equals
        best_diff, best_value = None, None
        for i in range(nb):
            for cand_value, cand_below in ((boundaries[i], lt[i]),
                                           (np.nextafter(boundaries[i], np.inf), le[i])):
                if 0 < cand_below < group_n:
                    diff = abs(cand_below / group_n - 0.5)
                    if best_diff is None or diff < best_diff:
                        best_diff, best_value = diff, float(cand_value)
        if best_value is not None:
            return SplitPlane(d, best_value)
        # dimension constant across the group; try the next one

    raise UnsplittableDataError(
        f"group {tuple(group)} at level {level} holds {group_n} points identical "
        f"in every of {dims} dimensions; cannot split into nonempty halves")


def redistribute(ep: Transport, group, pts: PointSet, plane: SplitPlane) -> tuple[PointSet, int]:
    """Exchange points so the lower half of the group holds coord < value.

    Every member computes the same contiguous-slice plan from the gathered
    per-rank (low, high) counts: each half's points form a virtual sequence
    ordered by (sender rank, stable local order) and receivers take slices of
    total//H (+1 for the first total%H). Returns (new points, points sent).
    """
    group = tuple(group)
    g = len(group)
    half = g // 2
    receivers = {0: group[:half], 1: group[half:]}
    mask_low = pts.coords[plane.dim] < plane.value if pts.count else np.zeros(0, dtype=bool)
    side_idx = {0: np.nonzero(mask_low)[0], 1: np.nonzero(~mask_low)[0]}

    counts = np.array([side_idx[0].shape[0], side_idx[1].shape[0]], dtype=np.int64)
    blobs = ep.group_all_gather(group, wire.KIND_GATHER, counts.tobytes())
    per_rank = {r: np.frombuffer(b, dtype=np.int64) for r, b in zip(group, blobs)}

    my_blocks: list[tuple[int, PointSet]] = []  # (sender, block) for my side
    sent = 0
    for side in (0, 1):
        recv = receivers[side]
        total = int(sum(per_rank[r][side] for r in group))
        share, rem = divmod(total, len(recv))
        targets = {r: share + (1 if i < rem else 0) for i, r in enumerate(recv)}
        # receiver interval starts within the virtual sequence
        rstart = {}
        pos = 0
        for r in recv:
            rstart[r] = pos
            pos += targets[r]
        # sender offsets
        soff = {}
        pos = 0
        for r in group:
            soff[r] = pos
            pos += int(per_rank[r][side])

        def interval_overlap(a0, a1, b0, b1):
            lo, hi = max(a0, b0), min(a1, b1)
            return (lo, hi) if lo < hi else None

        # what I send
        my0, my1 = soff[ep.rank], soff[ep.rank] + int(per_rank[ep.rank][side])
        for r in recv:
            ov = interval_overlap(my0, my1, rstart[r], rstart[r] + targets[r])
            if ov is None:
                continue
            idx = side_idx[side][ov[0] - my0: ov[1] - my0]
            if r == ep.rank:
                my_blocks.append((ep.rank, pts.take(idx)))
            else:
                ep.send(r, wire.KIND_POINTS, wire.encode_points(pts.take(idx)))
                sent += idx.shape[0]
        # what I receive
        if ep.rank in recv:
            mine0 = rstart[ep.rank]
            mine1 = mine0 + targets[ep.rank]
            for s in group:
                if s == ep.rank:
                    continue
                s0, s1 = soff[s], soff[s] + int(per_rank[s][side])
                if interval_overlap(s0, s1, mine0, mine1) is not None:
                    _, sender, payload = ep.receive_match(wire.KIND_POINTS, s)
                    my_blocks.append((sender, wire.decode_points(payload)))

    my_blocks.sort(key=lambda t: t[0])
    parts = [b for _, b in my_blocks if b.count]
    new_pts = PointSet.concat(parts) if parts else PointSet.empty(pts.dims)
    return new_pts, sent


def _rank_build(ep: Transport, pts: PointSet, cfg: ClusterConfig):
    p = ep.rank_count
    levels = p.bit_length() - 1
    dims = pts.dims
    plane_dims = np.full(max(p - 1, 0), -1, dtype=np.int32)
    plane_values = np.zeros(max(p - 1, 0), dtype=np.float64)
    stats = {"points_moved": 0, "t_global_split": 0.0, "t_redistribute": 0.0}

    for level in range(levels):
        group = _group_of(ep.rank, p, level)
        heap_idx = (1 << level) - 1 + (ep.rank >> (levels - level))

        t0 = time.perf_counter()
        plane = _choose_group_plane(ep, group, pts, cfg, level)
        # replicate this level's planes to every rank
        blob = struct.pack("<IId", heap_idx, plane.dim, plane.value)
        for other in ep.all_gather(blob):
            idx, d, v = struct.unpack("<IId", other)
            if plane_dims[idx] != -1 and (plane_dims[idx] != d or plane_values[idx] != v):
                raise AssertionError("rank group disagreed on a split plane")
            plane_dims[idx] = d
            plane_values[idx] = v
        stats["t_global_split"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        pts, sent = redistribute(ep, group, pts, plane)
        stats["points_moved"] += sent
        stats["t_redistribute"] += time.perf_counter() - t0

    gt = GlobalTree(dims, plane_dims, plane_values)
    region = gt.region_of(ep.rank)
    if pts.count:
        inside = (pts.coords >= region.lower[:, None]).all() and (pts.coords <= region.upper[:, None]).all()
        if not inside:
            raise AssertionError(f"rank {ep.rank}: point outside its region after redistribution")
    return gt, pts, stats


def build_global_tree(points_per_rank: list[PointSet], cfg: ClusterConfig,
                      ) -> tuple[GlobalTree, list[PointSet], list[dict]]:
    """Driver: run the SPMD construction over P in-process ranks.

    Returns the (replicated) GlobalTree, the redistributed per-rank points,
    and per-rank stats. P must be a power of two.
    """
    p = len(points_per_rank)
    if p < 1 or (p & (p - 1)) != 0:
        raise ValueError(f"rank count {p} is not a power of two")
    dims = {ps.dims for ps in points_per_rank}
    if len(dims) != 1:
        raise ValueError("inconsistent dimensionality across ranks")
    if sum(ps.count for ps in points_per_rank) == 0:
        raise ValueError("empty dataset")
    if p == 1:
        gt = GlobalTree(points_per_rank[0].dims,
                        np.empty(0, dtype=np.int32), np.empty(0, dtype=np.float64))
        return gt, list(points_per_rank), [{"points_moved": 0, "t_global_split": 0.0,
                                            "t_redistribute": 0.0}]
    results = run_ranks(p, _rank_build, [(ps, cfg) for ps in points_per_rank])
    trees = [r[0] for r in results]
    for t in trees[1:]:
        if t.to_bytes() != trees[0].to_bytes():
            raise AssertionError("global tree replicas differ across ranks")
    return trees[0], [r[1] for r in results], [r[2] for r in results]
