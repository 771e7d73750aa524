import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arborart.geometry import Box, SplitRecord, TreePartition
from arborart.splitnet import (
    best_divergence_exhaustive_1d,
    candidates_in,
    check_dense,
    check_regular,
    from_axes,
    from_points,
    load_points_csv,
    n_candidates,
    nearest_point_in,
    regular_grid,
)
from conftest import random_tree


def chopped_tree(rng, p, extra):
    """Every coordinate cut in every leaf, then ``extra`` random further cuts."""
    t = TreePartition(Box.unit(p))
    for j in range(p):
        splits = list(t.splits)
        for node in t.leaf_nodes:
            b = t.box(node)
            splits.append(SplitRecord(node, j, float(rng.uniform(b.lo[j] + 0.02, b.hi[j] - 0.02))))
        t = TreePartition(t.root, tuple(splits))
    for _ in range(extra):
        node = int(rng.choice(t.leaf_nodes))
        b = t.box(node)
        j = int(rng.integers(p))
        if b.lengths[j] > 0.05:
            tau = float(rng.uniform(b.lo[j] + 0.02, b.hi[j] - 0.02))
            t = TreePartition(t.root, t.splits + (SplitRecord(node, j, tau),))
    return t


class TestConstruction:
    def test_grid_counts(self):
        net = regular_grid(2, 5)
        assert net.b_n == 25
        np.testing.assert_array_equal(net.b, [5, 5])

    def test_grid_single_point(self):
        net = regular_grid(1, 1)
        np.testing.assert_array_equal(net.point_array(), [[0.5]])

    def test_grid_axis_values(self):
        np.testing.assert_allclose(regular_grid(1, 10).axes[0], np.arange(0.05, 1.0, 0.1))

    def test_points_without_ties(self, rng):
        pts = rng.random((30, 2))
        net = from_points(pts)
        np.testing.assert_array_equal(net.b, [30, 30])

    def test_identical_points(self):
        net = from_points(np.full((7, 3), 0.4))
        np.testing.assert_array_equal(net.b, [1, 1, 1])
        assert net.b_n == 7

    def test_three_points(self):
        net = from_points([(0.2, 0.2), (0.2, 0.8), (0.8, 0.5)])
        np.testing.assert_array_equal(net.b, [2, 3])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            from_points([(0.2, 1.2)])

    def test_csv(self, tmp_path):
        path = tmp_path / "pts.csv"
        path.write_text("x1,x2\n0.1,0.2\n0.3,0.2\n")
        net = load_points_csv(path)
        np.testing.assert_array_equal(net.b, [2, 1])

    def test_axes_hook(self):
        net = from_axes([[0.3, 0.1, 0.3], [0.5]])
        np.testing.assert_array_equal(net.axes[0], [0.1, 0.3])
        assert net.b_n == 2


class TestCandidates:
    def test_full_box(self):
        net = regular_grid(1, 10)
        assert candidates_in(net, Box([0], [1]), 0).size == 10

    def test_open_interior(self):
        net = regular_grid(1, 10)
        c = candidates_in(net, Box([0.05], [0.95]), 0)
        assert c.size == 8
        assert c[0] == pytest.approx(0.15)

    def test_degenerate(self):
        net = regular_grid(1, 10)
        assert candidates_in(net, Box([0.35], [0.35]), 0).size == 0

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200), st.floats(0, 1), st.floats(0, 1))
    def test_grid_count_within_one(self, m, a, b):
        lo, hi = min(a, b), max(a, b)
        net = regular_grid(1, m)
        bt = n_candidates(net, np.array([lo]), np.array([hi]))[0]
        assert bt == candidates_in(net, Box([lo], [hi]), 0).size
        assert abs(bt - m * (hi - lo)) <= 1 + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 201), st.integers(0, 201))
    def test_grid_count_bracket_on_grid_aligned_box(self, m, i, k):
        # endpoints at 0, 1 or grid values, as for boxes cut on the grid itself
        edges = np.concatenate([[0.0], (np.arange(1, m + 1) - 0.5) / m, [1.0]])
        lo, hi = sorted((edges[min(i, m + 1)], edges[min(k, m + 1)]))
        bt = n_candidates(regular_grid(1, m), np.array([lo]), np.array([hi]))[0]
        assert bt <= m * (hi - lo) + 1e-9
        assert m * (hi - lo) <= bt + 1 + 1e-9

    def test_nearest_point_product(self):
        net = regular_grid(2, 10)
        pt = nearest_point_in(net, Box([0.5, 0.0], [1.0, 0.3], [True, False]), [0.75, 0.15])
        np.testing.assert_allclose(pt, [0.75, 0.15])

    def test_nearest_point_respects_open_face(self):
        net = regular_grid(1, 10)
        assert nearest_point_in(net, Box([0.45], [0.5], [True]), [0.45]) is None
        np.testing.assert_allclose(nearest_point_in(net, Box([0.45], [0.5]), [0.45]), [0.45])

    def test_nearest_point_explicit(self):
        net = from_points([(0.1, 0.1), (0.4, 0.4), (0.9, 0.9)])
        np.testing.assert_allclose(nearest_point_in(net, Box([0, 0], [0.5, 0.5]), [0.3, 0.3]), [0.4, 0.4])
        assert nearest_point_in(net, Box([0.5, 0], [0.8, 0.5]), [0.6, 0.2]) is None


class TestDense:
    def test_already_on_net(self):
        net = regular_grid(1, 10)
        t = TreePartition(Box.unit(1), (SplitRecord(1, 0, 0.45),))
        ok, snapped, achieved = check_dense(net, t, {0}, 0.0)
        assert ok and achieved == 0.0

    def test_single_box(self):
        ok, _, achieved = check_dense(regular_grid(3, 2), TreePartition(Box.unit(3)), set(), 0.0)
        assert ok and achieved == 0.0

    def test_snap_nearest(self):
        t = TreePartition(Box.unit(1), (SplitRecord(1, 0, 0.52),))
        ok, snapped, achieved = check_dense(regular_grid(1, 10), t, {0}, 0.05)
        assert ok
        assert snapped.splits[0].tau == pytest.approx(0.55)
        assert achieved == pytest.approx(0.03)

    def test_snap_tie_goes_down(self):
        t = TreePartition(Box.unit(1), (SplitRecord(1, 0, 0.5),))
        _, snapped, _ = check_dense(regular_grid(1, 10), t, {0}, 1.0)
        assert snapped.splits[0].tau == pytest.approx(0.45)

    def test_no_candidate(self):
        t = TreePartition(Box.unit(1), ((1, 0, 0.5), (2, 0, 0.2)))
        ok, snapped, achieved = check_dense(regular_grid(1, 1), t, {0}, 1.0)
        assert not ok and snapped is None and achieved == float("inf")

    def test_not_chopped(self):
        t = TreePartition(Box.unit(2), ((1, 0, 0.5),))
        with pytest.raises(ValueError):
            check_dense(regular_grid(2, 4), t, {1}, 1.0)

    def test_snap_is_upper_bound_of_exhaustive(self, rng):
        net = regular_grid(1, 7)
        for _ in range(30):
            t = random_tree(rng, 1, int(rng.integers(1, 4)))
            ok, snapped, achieved = check_dense(net, t, {0}, 1.0)
            if snapped is None:
                continue
            assert best_divergence_exhaustive_1d(net, t) <= achieved + 1e-15

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 2), st.integers(4, 40))
    def test_grid_dense_bound(self, seed, p, m):
        rng = np.random.default_rng(seed)
        t = chopped_tree(rng, p, int(rng.integers(0, 5)))
        if min(b.lengths.min() for b in t.leaves) < 1.0 / m:
            return
        S = list(range(p))
        ok, snapped, achieved = check_dense(regular_grid(p, m), t, S, 1.0 / m)
        assert ok, achieved


class TestRegular:
    def test_fine_grid(self):
        ok, counters, part = check_regular(regular_grid(1, 512), Box.unit(1), [1.0], 4, [0])
        assert ok
        np.testing.assert_array_equal(counters, [4])
        assert part.n_leaves == 16

    def test_too_few_candidates(self):
        ok, counters, _ = check_regular(regular_grid(1, 1), Box.unit(1), [1.0], 2, [0])
        assert not ok
        assert counters.sum() == 1

    def test_zero_slack(self):
        ok, _, _ = check_regular(regular_grid(1, 512), Box.unit(1), [1.0], 4, [0], C=0.0)
        assert not ok

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(0, 10**6),
        st.integers(1, 3),
        st.sampled_from([16, 64, 100, 512]),
    )
    def test_grid_lemma_depth(self, seed, d, m):
        rng = np.random.default_rng(seed)
        lo = rng.uniform(0, 0.5, d)
        hi = np.minimum(1.0, lo + rng.uniform(3.0 / m, 1.0, d))
        box = Box(lo, hi)
        min_len = box.lengths.min()
        if m * min_len - 1 < 1:
            return
        L = int(np.floor(np.log2(m * min_len - 1)))
        alpha = rng.uniform(0.1, 1.0, d)
        ok, counters, _ = check_regular(regular_grid(d, m), box, alpha, L, list(range(d)))
        assert ok, (counters, L)
