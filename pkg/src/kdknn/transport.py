"""In-process message transport simulating a reliable MPI-style cluster.

Each rank owns a Transport endpoint. Delivery is reliable and per-sender
FIFO; collectives (barrier, all_gather, sum_reduce) synchronize all ranks
and return rank-ordered results, so algorithm outcomes cannot depend on
thread scheduling. A failure in any rank aborts the whole cluster instead
of deadlocking the rest.

This layer is the seam where a real network backend would plug in; all
cross-rank traffic is length-prefixed binary frames (see wire.py).
"""

from __future__ import annotations

import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import wire

__all__ = ["SimCluster", "Transport", "ClusterAborted", "run_ranks"]

_POLL_S = 0.05


class ClusterAborted(RuntimeError):
    """Raised in surviving ranks when another rank failed."""


class SimCluster:
    """Shared state for P in-process ranks."""

    def __init__(self, rank_count: int):
        if rank_count < 1:
            raise ValueError("rank_count must be >= 1")
        self.rank_count = rank_count
        self._queues = [queue.Queue() for _ in range(rank_count)]
        self._barrier = threading.Barrier(rank_count)
        self._gather_slots: list = [None] * rank_count
        self._failed = threading.Event()
        self._lock = threading.Lock()

    def endpoint(self, rank: int) -> "Transport":
        return Transport(self, rank)

    def abort(self) -> None:
        self._failed.set()
        self._barrier.abort()


class Transport:
    """Per-rank endpoint: point-to-point frames plus collectives."""

    def __init__(self, cluster: SimCluster, rank: int):
        self._cluster = cluster
        self.rank = rank
        self.rank_count = cluster.rank_count
        self._pending: list[tuple[int, int, bytes]] = []
        self.bytes_sent = 0
        self.frames_sent = 0

    def send(self, to_rank: int, kind: int, payload: bytes) -> None:
        frame = wire.pack_frame(kind, self.rank, payload)
        self.bytes_sent += len(frame)
        self.frames_sent += 1
        self._cluster._queues[to_rank].put(frame)

    def receive(self) -> tuple[int, int, bytes]:
        """Next message as (kind, sender, payload); blocks until one arrives."""
        if self._pending:
            return self._pending.pop(0)
        return self._take_from_queue()

    def receive_match(self, kind: int, sender: int | None = None) -> tuple[int, int, bytes]:
        """Next message of a given kind (and optionally sender), buffering
        anything else so no frame is lost."""
        for i, msg in enumerate(self._pending):
            if msg[0] == kind and (sender is None or msg[1] == sender):
                return self._pending.pop(i)
        while True:
            msg = self._take_from_queue()
            if msg[0] == kind and (sender is None or msg[1] == sender):
                return msg
            self._pending.append(msg)

    def _take_from_queue(self) -> tuple[int, int, bytes]:
        q = self._cluster._queues[self.rank]
        while True:
            if self._cluster._failed.is_set():
                raise ClusterAborted("another rank failed")
            try:
                frame = q.get(timeout=_POLL_S)
            except queue.Empty:
                continue
            return wire.unpack_frame(frame)

    def barrier(self) -> None:
        try:
            self._cluster._barrier.wait()
        except threading.BrokenBarrierError:
            raise ClusterAborted("barrier broken by rank failure") from None

    def all_gather(self, payload: bytes) -> list[bytes]:
        """Rank-ordered list of every rank's payload."""
        self._cluster._gather_slots[self.rank] = payload
        self.bytes_sent += len(payload) * (self.rank_count - 1)
        self.barrier()
        out = list(self._cluster._gather_slots)
        self.barrier()
        return out

    def sum_reduce(self, counts: np.ndarray) -> np.ndarray:
        """Elementwise sum of integer count arrays across all ranks."""
        gathered = self.all_gather(np.ascontiguousarray(counts, dtype="<i8").tobytes())
        total = np.zeros_like(np.asarray(counts, dtype=np.int64))
        for blob in gathered:
            total += np.frombuffer(blob, dtype="<i8").reshape(total.shape)
        return total

    # group collectives built over point-to-point sends; members must pass an
    # identical, sorted group tuple
    def group_all_gather(self, group: Sequence[int], kind: int, payload: bytes) -> list[bytes]:
        group = list(group)
        if len(group) == 1:
            return [payload]
        leader = group[0]
        if self.rank == leader:
            parts = {self.rank: payload}
            for other in group[1:]:
                _, sender, blob = self.receive_match(kind, other)
                parts[sender] = blob
            combined = b"".join(wire.pack_frame(kind, r, parts[r]) for r in group)
            for other in group[1:]:
                self.send(other, wire.KIND_GATHER, combined)
            return [parts[r] for r in group]
        self.send(leader, kind, payload)
        _, _, combined = self.receive_match(wire.KIND_GATHER, leader)
        return [wire.unpack_frame(f)[2] for f in wire.split_stream(combined)]

    def group_sum_reduce(self, group: Sequence[int], kind: int, counts: np.ndarray) -> np.ndarray:
        gathered = self.group_all_gather(group, kind, np.ascontiguousarray(counts, dtype="<i8").tobytes())
        total = np.zeros_like(np.asarray(counts, dtype=np.int64))
        for blob in gathered:
            total += np.frombuffer(blob, dtype="<i8").reshape(total.shape)
        return total


def run_ranks(rank_count: int, fn: Callable, per_rank_args: Sequence[tuple]) -> list:
    """SPMD driver: run fn(transport, *args_r) on one thread per rank.

    Returns the per-rank results in rank order; the first rank exception is
    re-raised after all threads stop (the cluster is aborted so none hang).
    """
    cluster = SimCluster(rank_count)
    results = [None] * rank_count
    errors: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def runner(rank: int):
        try:
            results[rank] = fn(cluster.endpoint(rank), *per_rank_args[rank])
        except BaseException as exc:  # propagate to driver, release peers
            with lock:
                errors.append((rank, exc))
            cluster.abort()

    if rank_count == 1:
        # fast path: no threads for the trivial cluster
        runner(0)
    else:
        with ThreadPoolExecutor(max_workers=rank_count) as pool:
            futures = [pool.submit(runner, r) for r in range(rank_count)]
            for f in futures:
                f.result()
    if errors:
        errors.sort(key=lambda e: e[0])
        rank, exc = errors[0]
        if not isinstance(exc, ClusterAborted):
            raise exc
        for _, e in errors:
            if not isinstance(e, ClusterAborted):
                raise e
        raise exc
    return results
