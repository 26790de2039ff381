"""Binary wire format for inter-rank messages.

Frames are length-prefixed: u32 length (of everything after the length
field), u8 message kind, u32 sender rank, payload. All integers and floats
are little-endian. Point blocks carry u32 count, u32 dims, the u64 ids, then
the f64 coordinates column-major (dimension 0 for all points, then
dimension 1, ...).
"""

from __future__ import annotations

import struct

import numpy as np

from .core import PointSet

__all__ = [
    "KIND_POINTS", "KIND_GATHER", "KIND_QUERIES", "KIND_REQUESTS", "KIND_RESPONSES",
    "pack_frame", "unpack_frame", "split_stream",
    "encode_points", "decode_points",
    "encode_queries", "decode_queries",
    "encode_requests", "decode_requests",
    "encode_responses", "decode_responses",
]

KIND_POINTS = 1
KIND_GATHER = 2
KIND_QUERIES = 3
KIND_REQUESTS = 4
KIND_RESPONSES = 5

_HEADER = struct.Struct("<IBI")  # length, kind, sender


def pack_frame(kind: int, sender: int, payload: bytes) -> bytes:
    return _HEADER.pack(5 + len(payload), kind, sender) + payload


def unpack_frame(frame: bytes) -> tuple[int, int, bytes]:
    length, kind, sender = _HEADER.unpack_from(frame, 0)
    if length != len(frame) - 4:
        raise ValueError(f"frame length {length} does not match buffer {len(frame) - 4}")
    return kind, sender, frame[_HEADER.size:]


def split_stream(buf: bytes) -> list[bytes]:
    """Reassemble whole frames from a concatenated byte stream."""
    frames = []
    off = 0
    while off < len(buf):
        if off + 4 > len(buf):
            raise ValueError("truncated frame header")
        (length,) = struct.unpack_from("<I", buf, off)
        end = off + 4 + length
        if end > len(buf):
            raise ValueError("truncated frame body")
        frames.append(buf[off:end])
        off = end
    return frames


def encode_points(ps: PointSet) -> bytes:
    head = struct.pack("<II", ps.count, ps.dims)
    ids = np.ascontiguousarray(ps.ids, dtype="<u8").tobytes()
    coords = np.ascontiguousarray(ps.coords, dtype="<f8").tobytes()
    return head + ids + coords


def decode_points(payload: bytes) -> PointSet:
    count, dims = struct.unpack_from("<II", payload, 0)
    off = 8
    ids = np.frombuffer(payload, dtype="<u8", count=count, offset=off).astype(np.uint64)
    off += 8 * count
    coords = np.frombuffer(payload, dtype="<f8", count=dims * count, offset=off)
    coords = coords.reshape(dims, count).astype(np.float64)
    return PointSet(np.ascontiguousarray(coords), ids)


def encode_queries(qids: np.ndarray, coords: np.ndarray) -> bytes:
    """Query routing block: coords is (count, dims) row-major in memory but
    encoded column-major like every point block."""
    count, dims = coords.shape
    head = struct.pack("<II", count, dims)
    ids = np.ascontiguousarray(qids, dtype="<u8").tobytes()
    cols = np.ascontiguousarray(coords.T, dtype="<f8").tobytes()
    return head + ids + cols


def decode_queries(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    count, dims = struct.unpack_from("<II", payload, 0)
    off = 8
    qids = np.frombuffer(payload, dtype="<u8", count=count, offset=off).astype(np.uint64)
    off += 8 * count
    cols = np.frombuffer(payload, dtype="<f8", count=dims * count, offset=off)
    coords = np.ascontiguousarray(cols.reshape(dims, count).T)
    return qids, coords


def encode_requests(qids: np.ndarray, sq_r_primes: np.ndarray, coords: np.ndarray, k: int) -> bytes:
    count, dims = coords.shape
    head = struct.pack("<III", count, dims, k)
    out = [head,
           np.ascontiguousarray(qids, dtype="<u8").tobytes(),
           np.ascontiguousarray(sq_r_primes, dtype="<f8").tobytes(),
           np.ascontiguousarray(coords.T, dtype="<f8").tobytes()]
    return b"".join(out)


def decode_requests(payload: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    count, dims, k = struct.unpack_from("<III", payload, 0)
    off = 12
    qids = np.frombuffer(payload, dtype="<u8", count=count, offset=off).astype(np.uint64)
    off += 8 * count
    rps = np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64)
    off += 8 * count
    cols = np.frombuffer(payload, dtype="<f8", count=dims * count, offset=off)
    coords = np.ascontiguousarray(cols.reshape(dims, count).T)
    return qids, rps, coords, int(k)


def encode_responses(qids: np.ndarray, counts: np.ndarray, dists: np.ndarray,
                     pids: np.ndarray, ranks: np.ndarray) -> bytes:
    head = struct.pack("<I", len(qids))
    out = [head,
           np.ascontiguousarray(qids, dtype="<u8").tobytes(),
           np.ascontiguousarray(counts, dtype="<u4").tobytes(),
           np.ascontiguousarray(dists, dtype="<f8").tobytes(),
           np.ascontiguousarray(pids, dtype="<u8").tobytes(),
           np.ascontiguousarray(ranks, dtype="<u4").tobytes()]
    return b"".join(out)


def decode_responses(payload: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    (nq,) = struct.unpack_from("<I", payload, 0)
    off = 4
    qids = np.frombuffer(payload, dtype="<u8", count=nq, offset=off).astype(np.uint64)
    off += 8 * nq
    counts = np.frombuffer(payload, dtype="<u4", count=nq, offset=off).astype(np.int64)
    off += 4 * nq
    total = int(counts.sum())
    dists = np.frombuffer(payload, dtype="<f8", count=total, offset=off).astype(np.float64)
    off += 8 * total
    pids = np.frombuffer(payload, dtype="<u8", count=total, offset=off).astype(np.uint64)
    off += 8 * total
    ranks = np.frombuffer(payload, dtype="<u4", count=total, offset=off).astype(np.int64)
    return qids, counts, dists, pids, ranks
