"""End-to-end drivers: build the two-tier index, run query workloads,
serialize tree bundles.

An Engine is the full simulated cluster: the replicated global tree plus one
packed local tree per rank. Bundles round-trip bit-exactly, which is what
the determinism suite compares across worker counts and rank counts.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterConfig, GlobalTree, RankState, build_global_tree
from .core import KnnResult, PointSet
from .dist_query import QueryBatch, QueryStats, STAGE_NAMES, distributed_knn, run_pipelined
from .local_tree import BuildConfig, LocalTree, build_local_tree

__all__ = ["RunConfig", "Engine", "ConstructReport", "QueryReport",
           "build_engine", "bundle_to_bytes", "bundle_from_bytes"]

_BUNDLE_MAGIC = b"PKDB"
_BUNDLE_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Operator-facing knobs; defaults follow the engine's tuning (k=5,
    10% query fraction, 256/1024 samples, 32-point buckets)."""

    ranks: int = 1
    workers: int = 1
    k: int = 5
    bucket_size: int = 32
    global_sample_m: int = 256
    local_sample_m: int = 1024
    batch_size: int = 4096
    seed: int = 0
    query_fraction: float = 0.10

    def __post_init__(self):
        if self.ranks < 1 or (self.ranks & (self.ranks - 1)) != 0:
            raise ValueError(f"ranks must be a power of two, got {self.ranks}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.query_fraction <= 1.0:
            raise ValueError("query_fraction must be in (0, 1]")

    def build_config(self, workers: int | None = None) -> BuildConfig:
        return BuildConfig(bucket_size=self.bucket_size,
                           local_sample_m=self.local_sample_m,
                           variance_sample=self.local_sample_m,
                           seed=self.seed,
                           workers=self.workers if workers is None else workers)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(global_sample_m=self.global_sample_m,
                             seed=self.seed, workers=self.workers)


@dataclass
class ConstructReport:
    """Construction phase breakdown (seconds) plus counters."""

    t_global_split: float = 0.0
    t_redistribute: float = 0.0
    t_local_split: float = 0.0
    t_pack: float = 0.0
    wall: float = 0.0
    points_moved: int = 0
    env: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"record": "construct_phase", "name": n, "seconds": getattr(self, f"t_{n}")}
               for n in ("global_split", "redistribute", "local_split", "pack")]
        out.append({"record": "construct_phase", "name": "wall", "seconds": self.wall})
        out.append({"record": "counter", "name": "points_moved", "value": self.points_moved})
        out.append({"record": "env", **self.env})
        return out


@dataclass
class QueryReport:
    """Query stage breakdown (seconds, summed over ranks) plus counters."""

    timings: dict = field(default_factory=dict)
    wall: float = 0.0
    queries: int = 0
    queries_forwarded: int = 0
    requests_sent: int = 0
    requests_received: int = 0
    soundness_violations: int = 0
    nodes_visited: int = 0
    buckets_scanned: int = 0
    points_compared: int = 0
    env: dict = field(default_factory=dict)

    @property
    def forwarded_fraction(self) -> float:
        return self.queries_forwarded / self.queries if self.queries else 0.0

    @staticmethod
    def from_stats(stats: list[QueryStats], wall: float, env: dict) -> "QueryReport":
        rep = QueryReport(wall=wall, env=env)
        rep.timings = {name: sum(s.timings[name] for s in stats) for name in STAGE_NAMES}
        rep.queries = sum(s.queries_ingested for s in stats)
        rep.queries_forwarded = sum(s.queries_forwarded for s in stats)
        rep.requests_sent = sum(s.requests_sent for s in stats)
        rep.requests_received = sum(s.requests_received for s in stats)
        rep.soundness_violations = sum(s.soundness_violations for s in stats)
        rep.nodes_visited = sum(s.nodes_visited for s in stats)
        rep.buckets_scanned = sum(s.buckets_scanned for s in stats)
        rep.points_compared = sum(s.points_compared for s in stats)
        return rep

    def records(self) -> list[dict]:
        out = [{"record": "query_phase", "name": n, "seconds": self.timings.get(n, 0.0)}
               for n in STAGE_NAMES]
        out.append({"record": "query_phase", "name": "wall", "seconds": self.wall})
        for name in ("queries", "queries_forwarded", "requests_sent", "requests_received",
                     "soundness_violations", "nodes_visited", "buckets_scanned",
                     "points_compared"):
            out.append({"record": "counter", "name": name, "value": getattr(self, name)})
        out.append({"record": "counter", "name": "forwarded_fraction",
                    "value": self.forwarded_fraction})
        out.append({"record": "env", **self.env})
        return out


@dataclass
class Engine:
    """A built cluster: per-rank states sharing one replicated global tree."""

    ranks: list[RankState]
    config: RunConfig

    @property
    def rank_count(self) -> int:
        return len(self.ranks)

    @property
    def dims(self) -> int:
        return self.ranks[0].global_tree.dims

    @property
    def total_points(self) -> int:
        return sum(r.points.count for r in self.ranks)

    def query(self, coords: np.ndarray, k: int | None = None,
              batch_size: int | None = None, pipelined: bool = True,
              query_ids: np.ndarray | None = None,
              ) -> tuple[list[KnnResult], QueryReport]:
        k = self.config.k if k is None else k
        batch_size = self.config.batch_size if batch_size is None else batch_size
        batch = QueryBatch.create(coords, k, query_ids=query_ids, batch_size=batch_size)
        t0 = time.perf_counter()
        if pipelined:
            results, stats = run_pipelined(self.ranks, batch, workers=self.config.workers)
        else:
            results, stats = distributed_knn(self.ranks, batch, workers=self.config.workers)
        wall = time.perf_counter() - t0
        env = {"ranks": self.rank_count, "workers": self.config.workers, "k": k,
               "n": self.total_points, "dims": self.dims, "seed": self.config.seed,
               "batch_size": batch_size, "pipelined": pipelined}
        return results, QueryReport.from_stats(stats, wall, env)


def _split_contiguous(points: PointSet, p: int) -> list[PointSet]:
    n = points.count
    bounds = [round(i * n / p) for i in range(p + 1)]
    return [points.take(np.arange(bounds[i], bounds[i + 1], dtype=np.int64)) for i in range(p)]


def build_engine(points: PointSet, cfg: RunConfig) -> tuple[Engine, ConstructReport]:
    """Construct the global partition and all local trees."""
    report = ConstructReport(env={"ranks": cfg.ranks, "workers": cfg.workers,
                                  "n": points.count, "dims": points.dims,
                                  "seed": cfg.seed, "bucket_size": cfg.bucket_size})
    t_start = time.perf_counter()
    parts = _split_contiguous(points, cfg.ranks)
    gt, redistributed, stats = build_global_tree(parts, cfg.cluster_config())
    report.t_global_split = max(s["t_global_split"] for s in stats)
    report.t_redistribute = max(s["t_redistribute"] for s in stats)
    report.points_moved = sum(s["points_moved"] for s in stats)

    per_rank_workers = cfg.workers if cfg.ranks == 1 else 1
    timings = [dict() for _ in range(cfg.ranks)]

    def build_one(r: int) -> LocalTree:
        return build_local_tree(redistributed[r], cfg.build_config(per_rank_workers),
                                timings=timings[r])

    t0 = time.perf_counter()
    if cfg.ranks == 1:
        trees = [build_one(0)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trees = list(pool.map(build_one, range(cfg.ranks)))
    t_local = time.perf_counter() - t0
    t_pack = sum(t.get("pack", 0.0) for t in timings)
    report.t_pack = t_pack
    report.t_local_split = max(t_local - t_pack, 0.0)
    report.wall = time.perf_counter() - t_start

    ranks = [RankState(rank=r, points=trees[r].points, global_tree=gt, tree=trees[r])
             for r in range(cfg.ranks)]
    return Engine(ranks, cfg), report


def _pack_array(arr: np.ndarray, dtype: str) -> bytes:
    blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return struct.pack("<Q", len(blob)) + blob


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        out = self.blob[self.off:self.off + n]
        if len(out) != n:
            raise ValueError("truncated bundle")
        self.off += n
        return out

    def array(self, dtype: str) -> np.ndarray:
        (ln,) = struct.unpack("<Q", self.take(8))
        return np.frombuffer(self.take(ln), dtype=dtype).copy()


def bundle_to_bytes(engine: Engine) -> bytes:
    """Canonical binary tree bundle (little-endian, pkd1 conventions)."""
    cfg = engine.config
    out = [_BUNDLE_MAGIC,
           struct.pack("<IIIIQ", _BUNDLE_VERSION, engine.rank_count, engine.dims,
                       cfg.bucket_size, cfg.seed & 0xFFFFFFFFFFFFFFFF)]
    gt_blob = engine.ranks[0].global_tree.to_bytes()
    out.append(struct.pack("<Q", len(gt_blob)))
    out.append(gt_blob)
    for rs in engine.ranks:
        tree = rs.tree
        out.append(struct.pack("<IQ", tree.n_nodes, tree.count))
        out.append(struct.pack("<I", tree.depth))
        out.append(_pack_array(tree.node_dim, "<i4"))
        out.append(_pack_array(tree.node_value, "<f8"))
        out.append(_pack_array(tree.node_left, "<i4"))
        out.append(_pack_array(tree.node_right, "<i4"))
        out.append(_pack_array(tree.node_count, "<i8"))
        out.append(_pack_array(tree.points.ids, "<u8"))
        out.append(_pack_array(tree.points.coords, "<f8"))
    return b"".join(out)


def bundle_from_bytes(blob: bytes) -> Engine:
    rd = _Reader(blob)
    if rd.take(4) != _BUNDLE_MAGIC:
        raise ValueError("not a tree bundle (bad magic)")
    version, p, dims, bucket_size, seed = struct.unpack("<IIIIQ", rd.take(24))
    if version != _BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    (gt_len,) = struct.unpack("<Q", rd.take(8))
    gt = GlobalTree.from_bytes(rd.take(gt_len))
    ranks = []
    for r in range(p):
        n_nodes, count = struct.unpack("<IQ", rd.take(12))
        (depth,) = struct.unpack("<I", rd.take(4))
        node_dim = rd.array("<i4").astype(np.int32)
        node_value = rd.array("<f8")
        node_left = rd.array("<i4").astype(np.int32)
        node_right = rd.array("<i4").astype(np.int32)
        node_count = rd.array("<i8")
        ids = rd.array("<u8").astype(np.uint64)
        coords = rd.array("<f8").reshape(dims, int(count))
        points = PointSet(np.ascontiguousarray(coords), ids)
        leaf_mask = node_dim < 0
        tree = LocalTree(node_dim, node_value, node_left, node_right, node_count,
                         points, int(depth),
                         node_left[leaf_mask].astype(np.int64),
                         node_right[leaf_mask].astype(np.int64))
        if tree.n_nodes != n_nodes:
            raise ValueError("bundle node count mismatch")
        ranks.append(RankState(rank=r, points=points, global_tree=gt, tree=tree))
    if rd.off != len(blob):
        raise ValueError("trailing bytes in bundle")
    cfg = RunConfig(ranks=p, bucket_size=int(bucket_size), seed=int(seed))
    return Engine(ranks, cfg)
