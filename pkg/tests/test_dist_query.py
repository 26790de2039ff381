import numpy as np
import pytest
from conftest import oracle_topk

from kdknn.cluster import owner_of, ranks_within
from kdknn.core import KnnResult, Neighbor, PointSet, sq_dists_to_columns
from kdknn.dist_query import (
    QueryBatch,
    RemoteResponse,
    distributed_knn,
    merge_topk,
    run_pipelined,
)
from kdknn.engine import RunConfig, build_engine
from kdknn.local_query import find_knn_batch


def make_dataset(n, dims, seed, kind="uniform"):
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        rows = rng.uniform(size=(n, dims))
    elif kind == "duplicate-heavy":
        rows = rng.uniform(size=(n, dims))
        n_dup = max(1, int(0.4 * n))
        sites = rows[rng.integers(0, max(1, n - n_dup), size=n_dup)]
        rows[n - n_dup:] = sites
    else:
        raise ValueError(kind)
    return PointSet.from_rows(rows)


def result_tuples(results):
    """(query_id, point_id, sq_dist) triples - the P-independent view."""
    return [(r.query_id, n.point_id, n.sq_dist) for r in results for n in r.neighbors]


def assert_matches_oracle(results, dataset, queries, k, ids_too=True):
    for pos, res in enumerate(results):
        od, oi = oracle_topk(dataset, queries[pos], k)
        got_d = [n.sq_dist for n in res.neighbors]
        assert got_d == od.tolist(), f"query {pos}: distance mismatch"
        if ids_too:
            assert [n.point_id for n in res.neighbors] == oi.tolist()
        res.check(k=k, total_in_scope=dataset.count)


class TestMergeTopk:
    def test_no_responses_identity(self):
        local = KnnResult(3, (Neighbor(1.0, 5, 0), Neighbor(2.0, 6, 0)), float("inf"))
        assert merge_topk(local, [], k=2) == KnnResult(3, local.neighbors, 2.0)

    def test_interleaved(self):
        local = KnnResult(0, (Neighbor(1.0, 1, 0), Neighbor(2.0, 2, 0), Neighbor(3.0, 3, 0)), 3.0)
        remote = [RemoteResponse(0, (Neighbor(1.5, 9, 1),))]
        merged = merge_topk(local, remote, k=3)
        assert [n.sq_dist for n in merged.neighbors] == [1.0, 1.5, 2.0]
        assert merged.r_prime == 2.0

    def test_randomized_vs_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            nl = rng.integers(0, 6)
            nr = rng.integers(0, 6)
            k = int(rng.integers(1, 6))
            dists = rng.uniform(size=nl + nr)
            ids = rng.permutation(100)[: nl + nr]
            pool = sorted(zip(dists.tolist(), ids.tolist()))
            local = KnnResult(1, tuple(Neighbor(d, i, 0) for d, i in sorted(
                zip(dists[:nl], ids[:nl]))), float("inf"))
            remote = [RemoteResponse(1, tuple(Neighbor(d, i, 1) for d, i in sorted(
                zip(dists[nl:], ids[nl:]))))]
            merged = merge_topk(local, remote, k=k)
            assert [(n.sq_dist, n.point_id) for n in merged.neighbors] == pool[:k]

    def test_duplicate_point_id_rejected(self):
        local = KnnResult(0, (Neighbor(1.0, 7, 0),), float("inf"))
        remote = [RemoteResponse(0, (Neighbor(2.0, 7, 1),))]
        with pytest.raises(ValueError, match="duplicate point_id"):
            merge_topk(local, remote, k=2)


class TestQueryBatch:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            QueryBatch.create(np.array([[np.nan, 0.0]]), k=1)

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            QueryBatch.create(np.zeros((2, 2)), k=1, query_ids=np.array([1, 1], dtype=np.uint64))

    def test_from_records_collects_errors(self):
        records = [(0, [0.1, 0.2]), (1, [0.1]), (2, [0.3, np.inf]), (3, [0.5, 0.6])]
        batch, errors = QueryBatch.from_records(records, dims=2, k=3)
        assert batch.count == 2
        assert batch.query_ids.tolist() == [0, 3]
        assert [e["query_id"] for e in errors] == [1, 2]

    def test_defaults(self):
        batch = QueryBatch.create(np.zeros((1, 2)), k=5)
        assert batch.batch_size == 4096


class TestDistributedKnn:
    def test_p1_collapses_to_local(self):
        ds = make_dataset(5000, 3, 0)
        engine, _ = build_engine(ds, RunConfig(ranks=1, seed=0))
        queries = np.random.default_rng(1).uniform(size=(100, 3))
        results, stats = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        ld, li, lc, _ = find_knn_batch(engine.ranks[0].tree, queries, k=5)
        for i, res in enumerate(results):
            assert [n.sq_dist for n in res.neighbors] == ld[i].tolist()
            assert [n.point_id for n in res.neighbors] == li[i].tolist()
        assert stats[0].requests_sent == 0

    def test_p8_matches_global_oracle(self):
        ds = make_dataset(100_000, 3, 42)
        engine, _ = build_engine(ds, RunConfig(ranks=8, seed=42))
        queries = np.random.default_rng(2).uniform(size=(1000, 3))
        results, stats = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        assert_matches_oracle(results, ds, queries, k=5)
        assert sum(s.soundness_violations for s in stats) == 0
        assert sum(s.requests_sent for s in stats) == sum(s.requests_received for s in stats)

    def test_interior_query_sends_nothing(self):
        ds = make_dataset(20_000, 2, 7)
        engine, _ = build_engine(ds, RunConfig(ranks=4, seed=7))
        gt = engine.ranks[0].global_tree
        # center-of-region probe: tiny r' ball stays inside the owner region
        rng = np.random.default_rng(3)
        probe = None
        for _ in range(200):
            q = rng.uniform(0.2, 0.8, size=2)
            owner = owner_of(gt, q)
            ld, _, lc, _ = find_knn_batch(engine.ranks[owner].tree, q.reshape(1, -1), 3)
            r_prime = ld[0, 2]
            if ranks_within(gt, q, r_prime).size == 0:
                probe = q
                break
        assert probe is not None, "no fully-interior query found"
        _, stats = distributed_knn(engine.ranks, QueryBatch.create(probe.reshape(1, -1), k=3))
        assert sum(s.requests_sent for s in stats) == 0

    @pytest.mark.parametrize("p", [1, 2, 4, 8, 16])
    def test_exactness_across_rank_counts(self, p):
        ds = make_dataset(20_000, 3, 5)
        engine, _ = build_engine(ds, RunConfig(ranks=p, seed=5))
        queries = np.random.default_rng(4).uniform(size=(200, 3))
        results, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        assert_matches_oracle(results, ds, queries, k=5)

    def test_p_invariance_of_results(self):
        ds = make_dataset(20_000, 3, 6)
        queries = np.random.default_rng(5).uniform(size=(300, 3))
        views = []
        for p in (1, 2, 4, 8):
            engine, _ = build_engine(ds, RunConfig(ranks=p, seed=6))
            results, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
            views.append(result_tuples(results))
        assert views[0] == views[1] == views[2] == views[3]

    def test_k_exceeding_total_returns_all(self):
        ds = make_dataset(40, 2, 8)
        engine, _ = build_engine(ds, RunConfig(ranks=4, seed=8))
        queries = np.random.default_rng(6).uniform(size=(5, 2))
        results, stats = distributed_knn(engine.ranks, QueryBatch.create(queries, k=100))
        for res in results:
            assert len(res.neighbors) == 40
        # under-full local results force r' = inf, forwarding to all ranks
        assert all(s.queries_forwarded == s.queries_owned for s in stats)

    def test_duplicate_heavy_exact(self):
        ds = make_dataset(2000, 2, 9, kind="duplicate-heavy")
        engine, _ = build_engine(ds, RunConfig(ranks=4, seed=9))
        queries = np.concatenate([ds.rows()[:20],
                                  np.random.default_rng(7).uniform(size=(30, 2))])
        results, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=3))
        assert_matches_oracle(results, ds, queries, k=3)

    def test_dim_mismatch_rejected(self):
        ds = make_dataset(100, 3, 10)
        engine, _ = build_engine(ds, RunConfig(ranks=2, seed=10))
        with pytest.raises(ValueError, match="dims"):
            distributed_knn(engine.ranks, QueryBatch.create(np.zeros((1, 2)), k=1))

    def test_forwarding_completeness(self):
        ds = make_dataset(5000, 3, 11)
        engine, _ = build_engine(ds, RunConfig(ranks=8, seed=11))
        gt = engine.ranks[0].global_tree
        rng = np.random.default_rng(8)
        queries = rng.uniform(size=(50, 3))
        results, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        for i, res in enumerate(results):
            q = queries[i]
            owner = owner_of(gt, q)
            ld, _, lc, _ = find_knn_batch(engine.ranks[owner].tree, q.reshape(1, -1), 5)
            r_prime = ld[0, 4] if lc[0] == 5 else np.inf
            contacted = set(ranks_within(gt, q, r_prime).tolist()) | {owner}
            kth = res.neighbors[-1].sq_dist
            for r in range(8):
                if r in contacted or engine.ranks[r].points.count == 0:
                    continue
                closest = sq_dists_to_columns(engine.ranks[r].points.coords, q).min()
                assert closest >= kth


class TestPipelining:
    def setup_engine(self):
        ds = make_dataset(30_000, 3, 12)
        engine, _ = build_engine(ds, RunConfig(ranks=4, seed=12))
        queries = np.random.default_rng(9).uniform(size=(500, 3))
        return ds, engine, queries

    def test_single_slice_equals_distributed(self):
        ds, engine, queries = self.setup_engine()
        base, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        piped, _ = run_pipelined(engine.ranks, QueryBatch.create(queries, k=5, batch_size=10**9))
        assert result_tuples(base) == result_tuples(piped)

    @pytest.mark.parametrize("batch_size", [1, 7, 64, 4096])
    def test_slice_size_invariance(self, batch_size):
        ds, engine, queries = self.setup_engine()
        base, _ = distributed_knn(engine.ranks, QueryBatch.create(queries, k=5))
        piped, stats = run_pipelined(
            engine.ranks, QueryBatch.create(queries, k=5, batch_size=batch_size))
        assert result_tuples(base) == result_tuples(piped)
        assert sum(s.soundness_violations for s in stats) == 0

    def test_pipelining_off_identical(self):
        ds, engine, queries = self.setup_engine()
        on, _ = run_pipelined(engine.ranks, QueryBatch.create(queries, k=5, batch_size=100),
                              pipelined=True)
        off, _ = run_pipelined(engine.ranks, QueryBatch.create(queries, k=5, batch_size=100),
                               pipelined=False)
        assert result_tuples(on) == result_tuples(off)

    def test_stage_timings_populated(self):
        ds, engine, queries = self.setup_engine()
        _, stats = run_pipelined(engine.ranks, QueryBatch.create(queries, k=5, batch_size=128))
        for s in stats:
            assert set(s.timings) == {"find_owner", "local_knn", "remote_identify",
                                      "remote_knn", "merge", "comm_wait"}
            assert all(v >= 0.0 for v in s.timings.values())
        assert sum(s.timings["local_knn"] for s in stats) > 0.0
