import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsmpnn.graph import build_radius_edges
from dsmpnn.partition import classify, decompose, kernel_completeness_check


def all_edges(coords, r):
    adj = build_radius_edges(coords, np.arange(len(coords)), r)
    return np.array([(i, j) for i, nbrs in enumerate(adj) for j in nbrs], dtype=np.int64).reshape(-1, 2)


class TestDecompose:
    def test_quadrants_no_overlap(self, rng):
        pts = rng.uniform(size=(400, 2))
        plan = decompose(pts, 4, 0.0)
        assert plan.n_proc == 4
        assert all(len(h) == 0 for h in plan.halo_ids)
        # two cuts: one per axis, at the medians
        los = {tuple(np.round(b.lo, 6)) for b in plan.boxes}
        assert len(los) == 4

    def test_single_rank(self, rng):
        pts = rng.uniform(size=(50, 2))
        plan = decompose(pts, 1, 0.2)
        np.testing.assert_array_equal(plan.interior_ids[0], np.arange(50))
        assert len(plan.halo_ids[0]) == 0 and plan.exchange_lists == {}

    def test_balanced_counts(self):
        pts = np.random.default_rng(0).uniform(size=(1000, 2))
        plan = decompose(pts, 4, 0.1)
        for ids in plan.interior_ids:
            assert 230 <= len(ids) <= 270

    @pytest.mark.parametrize("n_proc", [3, 6, 0])
    def test_power_of_two_only(self, n_proc):
        with pytest.raises(ValueError):
            decompose(np.zeros((10, 2)), n_proc, 0.1)

    def test_more_ranks_than_points(self):
        with pytest.raises(ValueError):
            decompose(np.random.default_rng(0).uniform(size=(3, 2)), 4, 0.1)

    def test_negative_overlap(self):
        with pytest.raises(ValueError):
            decompose(np.zeros((4, 2)), 2, -0.1)

    def test_boxes_cover_and_interiors_disjoint(self, rng):
        pts = rng.uniform(size=(300, 3))
        plan = decompose(pts, 8, 0.1)
        owned = np.concatenate(plan.interior_ids)
        assert sorted(owned) == list(range(300))
        vol = sum(np.prod(b.hi - b.lo) for b in plan.boxes)
        np.testing.assert_allclose(vol, np.prod(pts.max(0) - pts.min(0)))
        for b in plan.boxes:
            assert np.all(b.lo < b.hi)

    def test_deterministic(self, rng):
        pts = rng.uniform(size=(200, 2))
        a, b = decompose(pts, 4, 0.2), decompose(pts, 4, 0.2)
        for x, y in zip(a.interior_ids + a.halo_ids, b.interior_ids + b.halo_ids):
            np.testing.assert_array_equal(x, y)

    def test_exchange_consistency(self, rng):
        pts = rng.uniform(size=(500, 2))
        plan = decompose(pts, 4, 0.15)
        for q in range(4):
            union = np.concatenate([plan.exchange_lists[(p, q)] for p in range(4) if p != q])
            assert sorted(union) == sorted(plan.halo_ids[q])
            inside = plan.boxes[q].contains_extended(pts, 0.15)
            for p in range(4):
                if p != q:
                    expect = np.intersect1d(plan.interior_ids[p], np.flatnonzero(inside))
                    np.testing.assert_array_equal(np.sort(plan.exchange_lists[(p, q)]), expect)

    def test_rank_view_layout(self, rng):
        pts = rng.uniform(size=(100, 2))
        plan = decompose(pts, 2, 0.2)
        view = plan.rank_view(1)
        np.testing.assert_array_equal(view.local_ids[:view.n_interior], plan.interior_ids[1])
        np.testing.assert_array_equal(view.local_ids[view.halo_pos], plan.halo_ids[1])
        np.testing.assert_array_equal(view.local_ids[view.recv_pos[0]], plan.exchange_lists[(0, 1)])
        np.testing.assert_array_equal(plan.rank_view(0).local_ids[plan.rank_view(0).send_pos[1]],
                                      plan.exchange_lists[(0, 1)])


class TestClassify:
    def test_tie_goes_to_lower_rank(self):
        pts = np.array([[0.0, 0.5], [0.5, 0.5], [1.0, 0.5], [0.25, 0.1], [0.75, 0.9]])
        plan = decompose(pts, 2, 0.0)
        split = plan.boxes[0].hi[0]
        on_plane = np.flatnonzero(pts[:, 0] == split)
        assert len(on_plane) >= 1
        inter0, _ = classify(pts, plan, 0)
        inter1, _ = classify(pts, plan, 1)
        assert set(on_plane) <= set(inter0) and not set(on_plane) & set(inter1)

    def test_halo_box_arithmetic(self):
        xs = np.linspace(0.0, 1.0, 11)
        pts = np.stack([np.repeat(xs, 3), np.tile([0.0, 0.5, 1.0], 11)], axis=1)
        plan = decompose(pts, 2, 0.2)
        assert plan.boxes[0].hi[0] == pytest.approx(0.5)
        probe = np.array([[0.4, 0.5]])
        assert classify(probe, plan, 0)[0].tolist() == [0]
        assert classify(probe, plan, 1)[1].tolist() == [0]

    def test_zero_overlap_no_halo(self, rng):
        pts = rng.uniform(size=(80, 2))
        plan = decompose(pts, 4, 0.0)
        for k in range(4):
            assert len(classify(pts, plan, k)[1]) == 0

    def test_matches_plan(self, rng):
        pts = rng.uniform(size=(120, 2))
        plan = decompose(pts, 4, 0.1)
        for k in range(4):
            inter, halo = classify(pts, plan, k)
            np.testing.assert_array_equal(inter, plan.interior_ids[k])
            np.testing.assert_array_equal(halo, plan.halo_ids[k])


class TestKernelCompleteness:
    def test_l_equals_r_always_complete(self):
        for k in range(50):
            rng = np.random.default_rng(k)
            d = 2 if k % 2 else 3
            pts = rng.uniform(size=(int(rng.integers(20, 200)), d))
            r = float(rng.uniform(0.05, 0.4))
            plan = decompose(pts, int(2 ** rng.integers(0, 4)), r)
            assert kernel_completeness_check(plan, all_edges(pts, r), r), k

    def test_zero_overlap_incomplete(self):
        pts = np.random.default_rng(0).uniform(size=(400, 2))
        plan = decompose(pts, 2, 0.0)
        assert not kernel_completeness_check(plan, all_edges(pts, 0.1), 0.1)

    def test_single_rank_vacuous(self, rng):
        pts = rng.uniform(size=(50, 2))
        assert kernel_completeness_check(decompose(pts, 1, 0.0), all_edges(pts, 0.3), 0.3)

    def test_halo_sufficiency_with_larger_overlap(self, rng):
        pts = rng.uniform(size=(300, 2))
        assert kernel_completeness_check(decompose(pts, 4, 0.3), all_edges(pts, 0.2), 0.2)


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 150), st.sampled_from([1, 2, 4, 8]), st.floats(0.0, 0.3), st.integers(0, 2**31))
def test_disjoint_cover_property(n, n_proc, l, seed):
    pts = np.random.default_rng(seed).uniform(size=(n, 2))
    plan = decompose(pts, n_proc, l)
    owned = np.concatenate(plan.interior_ids)
    assert len(owned) == n and len(set(owned.tolist())) == n
    for q in range(n_proc):
        assert not set(plan.halo_ids[q].tolist()) & set(plan.interior_ids[q].tolist())


class TestDegenerateAxis:
    def test_collinear_points_split_along_spread_axis(self):
        pts = np.array([[0.1, 0.5], [0.45, 0.5], [0.55, 0.5], [0.9, 0.5]])
        plan = decompose(pts, 2, 0.2)
        assert plan.interior_ids[0].tolist() == [0, 1]
        assert plan.interior_ids[1].tolist() == [2, 3]
        assert plan.halo_ids[1].tolist() == [1]
