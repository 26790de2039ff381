import numpy as np
import pytest

from kdknn import wire
from kdknn.core import PointSet
from kdknn.transport import ClusterAborted, run_ranks


class TestFrames:
    def test_roundtrip(self):
        frame = wire.pack_frame(wire.KIND_POINTS, 3, b"abc")
        kind, sender, payload = wire.unpack_frame(frame)
        assert (kind, sender, payload) == (wire.KIND_POINTS, 3, b"abc")

    def test_length_prefix_is_le_u32(self):
        frame = wire.pack_frame(1, 0, b"xy")
        assert frame[:4] == (5 + 2).to_bytes(4, "little")

    def test_split_stream(self):
        frames = [wire.pack_frame(1, 0, b"a"), wire.pack_frame(2, 1, b"bb"), wire.pack_frame(3, 2, b"")]
        got = wire.split_stream(b"".join(frames))
        assert got == frames

    def test_truncated_stream_rejected(self):
        frame = wire.pack_frame(1, 0, b"abcdef")
        with pytest.raises(ValueError):
            wire.split_stream(frame[:-2])


class TestCodecs:
    def test_points_roundtrip(self):
        rng = np.random.default_rng(0)
        ps = PointSet.create(rng.uniform(size=(3, 17)), ids=np.arange(100, 117, dtype=np.uint64))
        back = wire.decode_points(wire.encode_points(ps))
        assert np.array_equal(back.coords, ps.coords)
        assert np.array_equal(back.ids, ps.ids)

    def test_points_block_layout(self):
        # u32 count, u32 dims, ids u64, column-major f64 coords
        ps = PointSet.create(np.array([[1.0, 2.0], [3.0, 4.0]]), ids=np.array([9, 8], dtype=np.uint64))
        blob = wire.encode_points(ps)
        assert blob[:4] == (2).to_bytes(4, "little")
        assert blob[4:8] == (2).to_bytes(4, "little")
        assert np.frombuffer(blob, "<u8", 2, 8).tolist() == [9, 8]
        assert np.frombuffer(blob, "<f8", 4, 24).tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_empty_points(self):
        back = wire.decode_points(wire.encode_points(PointSet.empty(5)))
        assert back.count == 0 and back.dims == 5

    def test_queries_roundtrip(self):
        rng = np.random.default_rng(1)
        qids = np.array([5, 1, 9], dtype=np.uint64)
        coords = rng.uniform(size=(3, 4))
        bq, bc = wire.decode_queries(wire.encode_queries(qids, coords))
        assert np.array_equal(bq, qids) and np.array_equal(bc, coords)

    def test_requests_roundtrip(self):
        rng = np.random.default_rng(2)
        qids = np.array([3, 4], dtype=np.uint64)
        rps = np.array([0.5, np.inf])
        coords = rng.uniform(size=(2, 3))
        gq, gr, gc, gk = wire.decode_requests(wire.encode_requests(qids, rps, coords, k=7))
        assert np.array_equal(gq, qids) and np.array_equal(gr, rps)
        assert np.array_equal(gc, coords) and gk == 7

    def test_responses_roundtrip(self):
        qids = np.array([11, 12], dtype=np.uint64)
        counts = np.array([2, 1], dtype=np.int64)
        dists = np.array([0.25, 0.5, 0.125])
        pids = np.array([7, 8, 9], dtype=np.uint64)
        ranks = np.array([1, 1, 3], dtype=np.int64)
        out = wire.decode_responses(wire.encode_responses(qids, counts, dists, pids, ranks))
        assert np.array_equal(out[0], qids) and np.array_equal(out[1], counts)
        assert np.array_equal(out[2], dists) and np.array_equal(out[3], pids)
        assert np.array_equal(out[4], ranks)


class TestTransport:
    def test_fifo_per_pair_and_sender_tags(self):
        def program(ep):
            if ep.rank == 0:
                for i in range(5):
                    ep.send(1, wire.KIND_GATHER, bytes([i]))
                return None
            got = [ep.receive() for _ in range(5)]
            assert [g[1] for g in got] == [0] * 5
            assert [g[2][0] for g in got] == [0, 1, 2, 3, 4]
            return True

        res = run_ranks(2, program, [(), ()])
        assert res[1] is True

    def test_receive_match_buffers_other_kinds(self):
        def program(ep):
            if ep.rank == 0:
                ep.send(1, wire.KIND_POINTS, b"p")
                ep.send(1, wire.KIND_GATHER, b"g")
                return None
            kind, _, payload = ep.receive_match(wire.KIND_GATHER)
            assert payload == b"g"
            kind, _, payload = ep.receive_match(wire.KIND_POINTS)
            assert payload == b"p"
            return True

        assert run_ranks(2, program, [(), ()])[1] is True

    def test_all_gather_rank_order(self):
        def program(ep):
            return ep.all_gather(bytes([ep.rank * 10]))

        res = run_ranks(4, program, [()] * 4)
        for r in range(4):
            assert res[r] == [bytes([0]), bytes([10]), bytes([20]), bytes([30])]

    def test_sum_reduce(self):
        def program(ep):
            return ep.sum_reduce(np.full(3, ep.rank + 1, dtype=np.int64))

        res = run_ranks(4, program, [()] * 4)
        for arr in res:
            assert arr.tolist() == [10, 10, 10]

    def test_group_all_gather(self):
        def program(ep):
            group = (0, 1) if ep.rank < 2 else (2, 3)
            return ep.group_all_gather(group, wire.KIND_GATHER, bytes([ep.rank]))

        res = run_ranks(4, program, [()] * 4)
        assert res[0] == [b"\x00", b"\x01"] == res[1]
        assert res[2] == [b"\x02", b"\x03"] == res[3]

    def test_failure_propagates_not_deadlocks(self):
        def program(ep):
            if ep.rank == 0:
                raise RuntimeError("rank 0 exploded")
            ep.barrier()

        with pytest.raises(RuntimeError, match="rank 0 exploded"):
            run_ranks(3, program, [()] * 3)

    def test_cluster_aborted_type_exists(self):
        assert issubclass(ClusterAborted, RuntimeError)
