"""Distributed KNN query protocol over simulated ranks.

Per batch slice, five steps: (1) route each query to the rank owning its
region; (2) the owner searches its local tree with r = inf, yielding the
pruning bound r'; (3) the owner forwards the query (with r') to exactly the
ranks whose regions intersect the r' ball; (4) contacted ranks run a
radius-bounded local search and reply; (5) the owner merges local and remote
neighbors by (sq_dist, point_id) and keeps k. Results are exactly the global
top-k for every query.

``run_pipelined`` processes the batch in slices: slice i+1's routing and
local KNN run while slice i's remote requests are being served, overlapping
computation with communication. Pipelining and slice size are pure
performance transforms - per-query results are identical to the one-shot
path, which the invariance tests pin down.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .cluster import RankState
from .core import KnnResult, Neighbor, min_sq_dist_to_region
from .local_query import find_knn_batch
from .transport import Transport, run_ranks

__all__ = [
    "QueryBatch",
    "RemoteRequest",
    "RemoteResponse",
    "QueryStats",
    "distributed_knn",
    "run_pipelined",
    "merge_topk",
]

STAGE_NAMES = ("find_owner", "local_knn", "remote_identify", "remote_knn", "merge", "comm_wait")


@dataclass(frozen=True, eq=False)
class QueryBatch:
    """A block of queries: unique ids, finite coords, one k for the batch."""

    query_ids: np.ndarray
    coords: np.ndarray
    k: int
    batch_size: int = 4096

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    @property
    def dims(self) -> int:
        return self.coords.shape[1]

    @staticmethod
    def create(coords: np.ndarray, k: int, query_ids: np.ndarray | None = None,
               batch_size: int = 4096) -> "QueryBatch":
        coords = np.ascontiguousarray(coords, dtype=np.float64)
        if coords.ndim != 2:
            raise ValueError("queries must be (nq, dims)")
        if k < 1:
            raise ValueError("k must be >= 1")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not np.isfinite(coords).all():
            raise ValueError("non-finite query coordinate")
        if query_ids is None:
            query_ids = np.arange(coords.shape[0], dtype=np.uint64)
        else:
            query_ids = np.ascontiguousarray(query_ids, dtype=np.uint64)
            if len(np.unique(query_ids)) != coords.shape[0]:
                raise ValueError("duplicate query ids")
        return QueryBatch(query_ids, coords, k, batch_size)

    @staticmethod
    def from_records(records, dims: int, k: int, batch_size: int = 4096,
                     ) -> tuple["QueryBatch", list[dict]]:
        """Build a batch from (query_id, point-sequence) pairs, skipping bad
        queries (wrong dimensionality, non-finite coords) into error records
        so the rest of the batch proceeds."""
        good_ids, good_rows, errors = [], [], []
        for qid, point in records:
            row = np.asarray(point, dtype=np.float64).ravel()
            if row.shape[0] != dims:
                errors.append({"query_id": int(qid),
                               "error": f"expected {dims} dims, got {row.shape[0]}"})
                continue
            if not np.isfinite(row).all():
                errors.append({"query_id": int(qid), "error": "non-finite coordinate"})
                continue
            good_ids.append(int(qid))
            good_rows.append(row)
        coords = np.vstack(good_rows) if good_rows else np.empty((0, dims))
        batch = QueryBatch.create(coords, k,
                                  query_ids=np.asarray(good_ids, dtype=np.uint64),
                                  batch_size=batch_size)
        return batch, errors


@dataclass(frozen=True)
class RemoteRequest:
    query_id: int
    point: np.ndarray
    k: int
    sq_r_prime: float


@dataclass(frozen=True)
class RemoteResponse:
    query_id: int
    neighbors: tuple[Neighbor, ...]


@dataclass
class QueryStats:
    """Per-rank protocol counters and stage timings (seconds)."""

    rank: int
    timings: dict = field(default_factory=dict)
    queries_ingested: int = 0
    queries_owned: int = 0
    queries_forwarded: int = 0
    requests_sent: int = 0
    requests_received: int = 0
    responses_received: int = 0
    soundness_violations: int = 0
    nodes_visited: int = 0
    buckets_scanned: int = 0
    points_compared: int = 0


def merge_topk(local: KnnResult, responses: list[RemoteResponse], k: int) -> KnnResult:
    """Merge the owner's result with remote responses; keep the global top-k.

    Raises on a duplicate point_id across inputs - regions are disjoint, so a
    duplicate means a partitioning bug, not a tie.
    """
    pool = list(local.neighbors)
    for resp in responses:
        pool.extend(resp.neighbors)
    ids = [n.point_id for n in pool]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate point_id across merge inputs for query {local.query_id}")
    pool.sort(key=lambda n: (n.sq_dist, n.point_id))
    kept = tuple(pool[:k])
    r_prime = kept[-1].sq_dist if len(kept) == k else float("inf")
    return KnnResult(local.query_id, kept, r_prime)


def _merge_arrays(dists, pids, pranks, k):
    """Array-level merge used on the hot path; same semantics as merge_topk."""
    if len(np.unique(pids)) != pids.shape[0]:
        raise ValueError("duplicate point_id across merge inputs")
    order = np.lexsort((pids, dists))[:k]
    return dists[order], pids[order], pranks[order]


class _RankProgram:
    """One rank's side of the query protocol (SPMD)."""

    def __init__(self, ep: Transport, state: RankState, batch: QueryBatch,
                 my_qids: np.ndarray, my_coords: np.ndarray, workers: int):
        self.ep = ep
        self.state = state
        self.k = batch.k
        self.dims = batch.dims
        self.workers = workers
        self.my_qids = my_qids
        self.my_coords = my_coords
        self.stats = QueryStats(rank=ep.rank, timings={name: 0.0 for name in STAGE_NAMES})
        self.stats.queries_ingested = int(my_qids.shape[0])
        self.results: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def _add(self, stage: str, t0: float) -> float:
        t1 = time.perf_counter()
        self.stats.timings[stage] += t1 - t0
        return t1

    # -- stage A: route, local knn, identify remotes, send requests --------
    def stage_a(self, lo: int, hi: int) -> dict:
        ep, gt = self.ep, self.state.global_tree
        p = ep.rank_count
        in_slice = (self.my_qids >= lo) & (self.my_qids < hi)
        qids = self.my_qids[in_slice]
        qcoords = self.my_coords[in_slice]

        t0 = time.perf_counter()
        if p == 1:
            owned_ids, owned_coords = qids, qcoords
            self._add("find_owner", t0)
        else:
            owners = gt.owner_of_batch(qcoords) if qids.shape[0] else np.empty(0, dtype=np.int64)
            dest_counts = np.bincount(owners, minlength=p) if qids.shape[0] else np.zeros(p, dtype=np.int64)
            t0 = self._add("find_owner", t0)
            matrix = ep.all_gather(np.ascontiguousarray(dest_counts, dtype="<i8").tobytes())
            parts_ids, parts_coords = [], []
            for dest in range(p):
                mask = owners == dest
                if dest == ep.rank:
                    parts_ids.append((ep.rank, qids[mask], qcoords[mask]))
                    continue
                if mask.any():
                    ep.send(dest, wire.KIND_QUERIES, wire.encode_queries(qids[mask], qcoords[mask]))
            for sender in range(p):
                if sender == ep.rank:
                    continue
                expected = np.frombuffer(matrix[sender], dtype="<i8")[ep.rank]
                if expected:
                    _, _, payload = ep.receive_match(wire.KIND_QUERIES, sender)
                    rq, rc = wire.decode_queries(payload)
                    parts_ids.append((sender, rq, rc))
            parts_ids.sort(key=lambda t: t[0])
            owned_ids = np.concatenate([t[1] for t in parts_ids]) if parts_ids else np.empty(0, dtype=np.uint64)
            owned_coords = (np.concatenate([t[2] for t in parts_ids])
                            if parts_ids else np.empty((0, self.dims)))
            self._add("comm_wait", t0)

        self.stats.queries_owned += int(owned_ids.shape[0])

        t0 = time.perf_counter()
        dists, pids, counts, counters = find_knn_batch(
            self.state.tree, owned_coords, self.k, workers=self.workers)
        self.stats.nodes_visited += int(counters[:, 0].sum())
        self.stats.buckets_scanned += int(counters[:, 1].sum())
        self.stats.points_compared += int(counters[:, 2].sum())
        r_primes = np.where(counts == self.k, dists[:, self.k - 1] if self.k <= dists.shape[1] else np.inf, np.inf)
        t0 = self._add("local_knn", t0)

        pending = {}
        if p > 1:
            targets_per_query = []
            req_counts = np.zeros(p, dtype=np.int64)
            for i in range(owned_ids.shape[0]):
                targets = gt.ranks_within(owned_coords[i], float(r_primes[i]))
                targets_per_query.append(targets)
                req_counts[targets] += 1
                if targets.size:
                    self.stats.queries_forwarded += 1
                    self.stats.requests_sent += int(targets.size)
            t0 = self._add("remote_identify", t0)

            req_matrix = ep.all_gather(np.ascontiguousarray(req_counts, dtype="<i8").tobytes())
            for dest in range(p):
                if dest == ep.rank or req_counts[dest] == 0:
                    continue
                sel = np.array([i for i, t in enumerate(targets_per_query) if dest in t], dtype=np.int64)
                ep.send(dest, wire.KIND_REQUESTS,
                        wire.encode_requests(owned_ids[sel], r_primes[sel], owned_coords[sel], self.k))
            self._add("comm_wait", t0)
            pending = {
                "req_matrix": req_matrix,
                "req_counts": req_counts,
            }

        return {
            "owned_ids": owned_ids,
            "owned_coords": owned_coords,
            "dists": dists,
            "pids": pids,
            "counts": counts,
            "r_primes": r_primes,
            **pending,
        }

    # -- stage B: serve remote requests, receive responses, merge ----------
    def stage_b(self, ctx: dict) -> None:
        ep, gt = self.ep, self.state.global_tree
        p = ep.rank_count
        owned_ids = ctx["owned_ids"]
        dists, pids, counts, r_primes = ctx["dists"], ctx["pids"], ctx["counts"], ctx["r_primes"]

        responses_by_query: dict[int, list] = {}
        if p > 1:
            my_region = gt.region_of(ep.rank)
            for sender in range(p):
                if sender == ep.rank:
                    continue
                expected = np.frombuffer(ctx["req_matrix"][sender], dtype="<i8")[ep.rank]
                if expected == 0:
                    continue
                t0 = time.perf_counter()
                _, _, payload = ep.receive_match(wire.KIND_REQUESTS, sender)
                t0 = self._add("comm_wait", t0)
                rqids, rps, rcoords, rk = wire.decode_requests(payload)
                self.stats.requests_received += int(rqids.shape[0])
                for i in range(rqids.shape[0]):
                    if not min_sq_dist_to_region(rcoords[i], my_region) < rps[i]:
                        self.stats.soundness_violations += 1
                rd, rp, rc, rcnt = find_knn_batch(self.state.tree, rcoords, rk, radii=rps,
                                                  workers=self.workers)
                self.stats.nodes_visited += int(rcnt[:, 0].sum())
                self.stats.buckets_scanned += int(rcnt[:, 1].sum())
                self.stats.points_compared += int(rcnt[:, 2].sum())
                flat_d = np.concatenate([rd[i, : rc[i]] for i in range(rqids.shape[0])]) if rqids.shape[0] else np.empty(0)
                flat_p = np.concatenate([rp[i, : rc[i]] for i in range(rqids.shape[0])]) if rqids.shape[0] else np.empty(0, dtype=np.uint64)
                flat_r = np.full(flat_d.shape[0], ep.rank, dtype=np.int64)
                self._add("remote_knn", t0)
                ep.send(sender, wire.KIND_RESPONSES,
                        wire.encode_responses(rqids, rc, flat_d, flat_p, flat_r))

            # collect responses for my owned queries
            expected_from = {}
            for dest in range(p):
                if dest != ep.rank and ctx["req_counts"][dest] > 0:
                    expected_from[dest] = int(ctx["req_counts"][dest])
            for server in sorted(expected_from):
                t0 = time.perf_counter()
                _, _, payload = ep.receive_match(wire.KIND_RESPONSES, server)
                t0 = self._add("comm_wait", t0)
                qids_r, counts_r, d_r, p_r, rank_r = wire.decode_responses(payload)
                self.stats.responses_received += int(qids_r.shape[0])
                off = 0
                for i in range(qids_r.shape[0]):
                    c = int(counts_r[i])
                    responses_by_query.setdefault(int(qids_r[i]), []).append(
                        (d_r[off:off + c], p_r[off:off + c], rank_r[off:off + c]))
                    off += c
                self._add("merge", t0)

        t0 = time.perf_counter()
        for i in range(owned_ids.shape[0]):
            qid = int(owned_ids[i])
            c = int(counts[i])
            ld = dists[i, :c]
            lp = pids[i, :c]
            lr = np.full(c, ep.rank, dtype=np.int64)
            extra = responses_by_query.get(qid)
            if extra:
                alld = np.concatenate([ld] + [e[0] for e in extra])
                allp = np.concatenate([lp] + [e[1] for e in extra])
                allr = np.concatenate([lr] + [e[2] for e in extra])
                self.results[qid] = _merge_arrays(alld, allp, allr, self.k)
            else:
                self.results[qid] = (ld, lp, lr)
        self._add("merge", t0)


def _rank_query_program(ep: Transport, state: RankState, batch: QueryBatch,
                        my_qids: np.ndarray, my_coords: np.ndarray,
                        slice_size: int, pipelined: bool, workers: int):
    prog = _RankProgram(ep, state, batch, my_qids, my_coords, workers)
    total = batch.count
    slices = [(lo, min(lo + slice_size, total)) for lo in range(0, max(total, 1), slice_size)] or [(0, 0)]
    if not pipelined:
        for lo, hi in slices:
            ctx = prog.stage_a(lo, hi)
            prog.stage_b(ctx)
    else:
        # depth-2 software pipeline: slice i's remote work overlaps slice
        # i+1's routing and local KNN
        prev = None
        for lo, hi in slices:
            ctx = prog.stage_a(lo, hi)
            if prev is not None:
                prog.stage_b(prev)
            prev = ctx
        if prev is not None:
            prog.stage_b(prev)
    return prog.results, prog.stats


def _run(ranks: list[RankState], batch: QueryBatch, slice_size: int,
         pipelined: bool, workers: int) -> tuple[list[KnnResult], list[QueryStats]]:
    p = len(ranks)
    if batch.count and batch.dims != ranks[0].global_tree.dims:
        raise ValueError(f"query dims {batch.dims} != dataset dims {ranks[0].global_tree.dims}")
    # round-robin ingestion: query i arrives at rank i mod P
    my_args = []
    positions = np.arange(batch.count)
    for r in range(p):
        mask = positions % p == r
        my_args.append((ranks[r], batch, positions[mask].astype(np.uint64),
                        batch.coords[mask], slice_size, pipelined, workers))
    outs = run_ranks(p, _rank_query_program, my_args)

    merged: dict[int, tuple] = {}
    for results, _stats in outs:
        merged.update(results)
    knn_results = []
    for pos in range(batch.count):
        d, pid, rnk = merged[pos]
        knn_results.append(KnnResult.from_sorted(int(batch.query_ids[pos]), d, pid, rnk, batch.k))
    return knn_results, [o[1] for o in outs]


def distributed_knn(ranks: list[RankState], batch: QueryBatch,
                    workers: int = 1) -> tuple[list[KnnResult], list[QueryStats]]:
    """One-shot 5-step protocol over the whole batch (single slice)."""
    return _run(ranks, batch, slice_size=max(batch.count, 1), pipelined=False, workers=workers)


def run_pipelined(ranks: list[RankState], batch: QueryBatch, workers: int = 1,
                  pipelined: bool = True) -> tuple[list[KnnResult], list[QueryStats]]:
    """Sliced, pipelined protocol; results identical to distributed_knn."""
    return _run(ranks, batch, slice_size=batch.batch_size, pipelined=pipelined, workers=workers)
