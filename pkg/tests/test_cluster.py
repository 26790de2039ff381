import numpy as np
import pytest

from kdknn.cluster import (
    ClusterConfig,
    GlobalTree,
    UnsplittableDataError,
    build_global_tree,
    choose_global_split_dimension,
    redistribute,
    owner_of,
    ranks_within,
    sample_points,
)
from kdknn.core import PointSet, SplitPlane, min_sq_dist_to_region
from kdknn.transport import run_ranks


def split_rows(rows, p, ids=None):
    """Contiguous even chunks, one PointSet per rank."""
    n = rows.shape[0]
    if ids is None:
        ids = np.arange(n, dtype=np.uint64)
    bounds = [round(i * n / p) for i in range(p + 1)]
    return [PointSet.from_rows(rows[bounds[i]:bounds[i + 1]], ids=ids[bounds[i]:bounds[i + 1]])
            for i in range(p)]


def collect_multiset(parts):
    out = []
    for ps in parts:
        for i in range(ps.count):
            out.append((int(ps.ids[i]), tuple(ps.coords[:, i].tolist())))
    return sorted(out)


class TestSamplePoints:
    def test_deterministic_and_subset(self):
        ps = PointSet.from_rows(np.random.default_rng(0).uniform(size=(500, 2)))
        a = sample_points(ps, 64, seed=3)
        b = sample_points(ps, 64, seed=3)
        assert np.array_equal(a.ids, b.ids)
        assert np.isin(a.ids, ps.ids).all()
        assert len(np.unique(a.ids)) == 64


class TestBuildGlobalTree:
    def test_p1_trivial(self):
        rows = np.random.default_rng(0).uniform(size=(100, 3))
        parts = split_rows(rows, 1)
        gt, out, _ = build_global_tree(parts, ClusterConfig(seed=0))
        assert gt.levels == 0 and gt.rank_count == 1
        assert np.array_equal(out[0].coords, parts[0].coords)
        assert owner_of(gt, rows[0]) == 0

    def test_p2_split_near_true_median_1d(self):
        hits = 0
        for seed in range(10):
            rows = np.random.default_rng(seed).uniform(size=(20_000, 1))
            gt, out, _ = build_global_tree(split_rows(rows, 2), ClusterConfig(seed=seed))
            value = gt.plane_values[0]
            frac0 = out[0].count / 20_000
            if abs(value - 0.5) <= 0.05 and 0.40 <= frac0 <= 0.60:
                hits += 1
        assert hits >= 9

    def test_p8_conservation_and_region_membership(self):
        rows = np.random.default_rng(7).uniform(size=(100_000, 3))
        parts = split_rows(rows, 8)
        gt, out, _ = build_global_tree(parts, ClusterConfig(seed=7))
        assert collect_multiset(out) == collect_multiset(parts)
        for r in range(8):
            region = gt.region_of(r)
            for i in range(0, out[r].count, 997):
                assert min_sq_dist_to_region(out[r].coords[:, i], region) == 0.0
        # replication: already asserted internally; spot-check serialization
        assert GlobalTree.from_bytes(gt.to_bytes()).to_bytes() == gt.to_bytes()

    def test_balance_after_full_build(self):
        rng = np.random.default_rng(13)
        # skewed: exponential-ish cloud
        rows = rng.exponential(scale=1.0, size=(40_000, 3))
        gt, out, _ = build_global_tree(split_rows(rows, 8), ClusterConfig(seed=13))
        target = 40_000 / 8
        for ps in out:
            assert abs(ps.count - target) <= 0.10 * target

    def test_deterministic_across_runs(self):
        rows = np.random.default_rng(3).uniform(size=(5000, 2))
        a_gt, a_out, _ = build_global_tree(split_rows(rows, 4), ClusterConfig(seed=3))
        b_gt, b_out, _ = build_global_tree(split_rows(rows, 4), ClusterConfig(seed=3))
        assert a_gt.to_bytes() == b_gt.to_bytes()
        for x, y in zip(a_out, b_out):
            assert np.array_equal(x.ids, y.ids)
            assert np.array_equal(x.coords, y.coords)

    def test_non_power_of_two_rejected(self):
        rows = np.random.default_rng(0).uniform(size=(30, 2))
        with pytest.raises(ValueError, match="power of two"):
            build_global_tree(split_rows(rows, 3), ClusterConfig())

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty dataset"):
            build_global_tree([PointSet.empty(2), PointSet.empty(2)], ClusterConfig())

    def test_all_identical_points_unsplittable(self):
        rows = np.tile([1.0, 2.0], (50, 1))
        with pytest.raises(UnsplittableDataError):
            build_global_tree(split_rows(rows, 2), ClusterConfig(seed=0))

    def test_single_point_multi_rank(self):
        # n < P: trivially splittable, empty ranks allowed
        parts = [PointSet.from_rows([[0.5, 0.5]])] + [PointSet.empty(2) for _ in range(3)]
        gt, out, _ = build_global_tree(parts, ClusterConfig(seed=1))
        assert sum(ps.count for ps in out) == 1
        holder = [r for r, ps in enumerate(out) if ps.count][0]
        assert owner_of(gt, np.array([0.5, 0.5])) == holder

    def test_duplicate_heavy_survives(self):
        rng = np.random.default_rng(5)
        uniq = rng.uniform(size=(120, 2))
        dup = np.tile(uniq[0], (80, 1))
        rows = np.concatenate([uniq, dup])
        rng.shuffle(rows)
        gt, out, _ = build_global_tree(split_rows(rows, 4), ClusterConfig(seed=5))
        assert sum(ps.count for ps in out) == 200
        # all copies of one coordinate land on a single rank
        site = uniq[0]
        holders = [r for r, ps in enumerate(out) if ps.count
                   and ((ps.coords == site[:, None]).all(axis=0)).any()]
        assert len(holders) == 1


class TestChooseGlobalSplitDimension:
    def test_anisotropic_matches_full_variance_oracle(self):
        rng = np.random.default_rng(2)
        rows = np.stack([rng.uniform(0, 1, 8000), rng.uniform(0, 40, 8000)], axis=1)
        parts = split_rows(rows, 4)
        oracle = int(np.argmax(np.var(rows, axis=0)))

        def program(ep, pts):
            return choose_global_split_dimension(ep, tuple(range(4)), pts, ClusterConfig(seed=2))

        dims = run_ranks(4, program, [(p,) for p in parts])
        assert set(dims) == {oracle} == {1}

    def test_identical_points_dim0(self):
        parts = split_rows(np.tile([3.0, 3.0], (40, 1)), 2)

        def program(ep, pts):
            return choose_global_split_dimension(ep, (0, 1), pts, ClusterConfig(seed=0))

        assert run_ranks(2, program, [(p,) for p in parts]) == [0, 0]

    def test_1d(self):
        parts = split_rows(np.random.default_rng(1).uniform(size=(100, 1)), 2)

        def program(ep, pts):
            return choose_global_split_dimension(ep, (0, 1), pts, ClusterConfig(seed=1))

        assert run_ranks(2, program, [(p,) for p in parts]) == [0, 0]


class TestRedistribute:
    def test_already_separated_moves_nothing(self):
        left = PointSet.from_rows(np.random.default_rng(0).uniform(0, 0.4, size=(50, 1)),
                                  ids=np.arange(50, dtype=np.uint64))
        right = PointSet.from_rows(np.random.default_rng(1).uniform(0.6, 1.0, size=(50, 1)),
                                   ids=np.arange(50, 100, dtype=np.uint64))

        def program(ep, pts):
            return redistribute(ep, (0, 1), pts, SplitPlane(0, 0.5))

        res = run_ranks(2, program, [(left,), (right,)])
        assert res[0][1] == 0 and res[1][1] == 0
        assert np.array_equal(res[0][0].ids, left.ids)
        assert np.array_equal(res[1][0].ids, right.ids)

    def test_all_on_one_rank_moves_about_half(self):
        rows = np.sort(np.random.default_rng(2).uniform(size=(100, 1)), axis=0)
        full = PointSet.from_rows(rows)
        empty = PointSet.empty(1)
        median = float(np.median(rows))

        def program(ep, pts):
            return redistribute(ep, (0, 1), pts, SplitPlane(0, median))

        res = run_ranks(2, program, [(full,), (empty,)])
        assert res[0][0].count + res[1][0].count == 100
        assert abs(res[0][0].count - 50) <= 1
        assert (res[0][0].coords[0] < median).all()
        assert (res[1][0].coords[0] >= median).all()
        assert collect_multiset([res[0][0], res[1][0]]) == collect_multiset([full, empty])


class TestOwnerAndRanksWithin:
    def build(self, p, seed=11, n=20_000):
        rows = np.random.default_rng(seed).uniform(size=(n, 3))
        return build_global_tree(split_rows(rows, p), ClusterConfig(seed=seed))

    def test_tie_goes_right(self):
        pdim = np.array([0], dtype=np.int32)
        pval = np.array([5.0])
        gt = GlobalTree(2, pdim, pval)
        assert owner_of(gt, np.array([5.0, 0.0])) == 1
        assert owner_of(gt, np.array([4.999, 0.0])) == 0

    def test_owner_region_contains_query(self):
        gt, _, _ = self.build(8)
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.uniform(-0.2, 1.2, size=3)
            region = gt.region_of(owner_of(gt, q))
            assert min_sq_dist_to_region(q, region) == 0.0

    def test_owner_batch_matches_scalar(self):
        gt, _, _ = self.build(16)
        queries = np.random.default_rng(1).uniform(size=(200, 3))
        batch = gt.owner_of_batch(queries)
        for i in range(200):
            assert batch[i] == owner_of(gt, queries[i])

    def test_ranks_within_zero_radius_empty(self):
        gt, _, _ = self.build(8)
        assert ranks_within(gt, np.full(3, 0.5), 0.0).size == 0

    def test_ranks_within_infinite_radius_all_but_owner(self):
        gt, _, _ = self.build(8)
        q = np.full(3, 0.5)
        got = set(ranks_within(gt, q, np.inf).tolist())
        assert got == set(range(8)) - {owner_of(gt, q)}

    def test_ranks_within_matches_all_regions_oracle(self):
        gt, _, _ = self.build(16)
        rng = np.random.default_rng(4)
        regions = gt.regions()
        for _ in range(200):
            q = rng.uniform(-0.1, 1.1, size=3)
            sq_r = rng.uniform(0, 0.2) ** 2
            owner = owner_of(gt, q)
            oracle = {r for r in range(16)
                      if r != owner and min_sq_dist_to_region(q, regions[r]) < sq_r}
            assert set(ranks_within(gt, q, sq_r).tolist()) == oracle
