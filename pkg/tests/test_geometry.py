import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arborart.geometry import (
    Box,
    BoxPartition,
    GeometryError,
    SplitRecord,
    TreePartition,
    graft,
    hausdorff_box,
    is_s_chopped,
    partition_divergence,
    partition_divergence_bruteforce,
)
from conftest import random_tree


def halves(p, j, tau):
    return TreePartition(Box.unit(p), (SplitRecord(1, j, tau),)).partition()


def grid_hausdorff(a, b, k=64):
    """max-min over a k^p grid of each box, with exact point-to-box distance."""

    def grid(box):
        axes = [np.linspace(lo, hi, k) for lo, hi in zip(box.lo, box.hi)]
        return np.array(list(itertools.product(*axes)))

    def to_box(x, box):
        return np.max(np.maximum(np.maximum(box.lo - x, x - box.hi), 0.0), axis=1)

    return max(to_box(grid(a), b).max(), to_box(grid(b), a).max())


class TestBox:
    def test_rejects_inverted(self):
        with pytest.raises(GeometryError):
            Box([0.6], [0.5])

    def test_rejects_outside_cube(self):
        with pytest.raises(GeometryError):
            Box([-0.1], [0.5])

    def test_split_boundary_convention(self):
        left, right = Box.unit(1).split(0, 0.5)
        assert left.contains([[0.5]])[0]
        assert not right.contains([[0.5]])[0]
        assert right.contains([[0.50001]])[0]
        assert left.contains([[0.0]])[0]

    def test_split_must_be_interior(self):
        with pytest.raises(GeometryError):
            Box.unit(1).split(0, 1.0)

    def test_volume_and_center(self):
        b = Box([0, 0.5], [0.5, 1.0])
        assert b.volume == 0.25
        np.testing.assert_allclose(b.center, [0.25, 0.75])


class TestSChopped:
    def test_cut_coordinate(self):
        assert is_s_chopped(halves(3, 0, 0.5), {0})

    def test_single_box_empty_set(self):
        assert is_s_chopped(BoxPartition((Box.unit(3),)), set())

    def test_uncut_coordinate(self):
        assert not is_s_chopped(halves(3, 0, 0.5), {1})

    def test_empty_set_with_cut(self):
        assert not is_s_chopped(halves(2, 0, 0.5), set())


class TestHausdorff:
    def test_identical(self):
        b = Box([0.1, 0.2], [0.3, 0.9])
        assert hausdorff_box(b, b) == 0.0

    def test_1d(self):
        assert hausdorff_box(Box([0], [0.5]), Box([0], [0.6])) == pytest.approx(0.1)

    def test_2d(self):
        assert hausdorff_box(Box([0, 0], [0.5, 1]), Box([0, 0], [0.6, 1])) == pytest.approx(0.1)

    def test_dimension_mismatch(self):
        with pytest.raises(GeometryError):
            hausdorff_box(Box.unit(1), Box.unit(2))

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 2),
        st.lists(st.floats(0, 1), min_size=8, max_size=8),
    )
    def test_matches_grid_oracle(self, p, v):
        v = np.array(v)
        a = Box(np.minimum(v[0:p], v[2:2 + p]), np.maximum(v[0:p], v[2:2 + p]))
        b = Box(np.minimum(v[4:4 + p], v[6:6 + p]), np.maximum(v[4:4 + p], v[6:6 + p]))
        assert abs(hausdorff_box(a, b) - grid_hausdorff(a, b)) <= 1e-9


class TestDivergence:
    def test_self(self):
        P = halves(1, 0, 0.5)
        assert partition_divergence(P, P) == 0.0

    def test_shifted_cut(self):
        P1, P2 = halves(1, 0, 0.5), halves(1, 0, 0.6)
        assert partition_divergence(P1, P2) == pytest.approx(0.1)

    def test_order_invariant(self):
        P1, P2 = halves(1, 0, 0.5), halves(1, 0, 0.6)
        reversed_boxes = BoxPartition(tuple(reversed(P2.boxes)))
        assert partition_divergence(P1, reversed_boxes) == pytest.approx(0.1)

    def test_unequal_sizes(self):
        with pytest.raises(GeometryError):
            partition_divergence(halves(1, 0, 0.5), BoxPartition((Box.unit(1),)))

    def test_matches_bruteforce(self, rng):
        for _ in range(50):
            p = int(rng.integers(1, 4))
            J = int(rng.integers(1, 7))
            t1 = random_tree(rng, p, J - 1)
            t2 = random_tree(rng, p, J - 1)
            if t1.n_leaves != t2.n_leaves:
                continue
            d = partition_divergence(t1, t2)
            assert d == partition_divergence_bruteforce(t1, t2)
            assert d == partition_divergence(t2, t1)


class TestTreePartition:
    def test_heap_children(self):
        t = TreePartition(Box.unit(2), ((1, 0, 0.5), (3, 1, 0.25)))
        assert t.leaf_nodes == (2, 6, 7)
        np.testing.assert_array_equal(t.leaf_depths(), [1, 2, 2])

    def test_orphan_split_rejected(self):
        with pytest.raises(GeometryError):
            TreePartition(Box.unit(1), ((2, 0, 0.25),))

    def test_json_roundtrip(self):
        t = TreePartition(Box.unit(2), ((1, 0, 0.5), (3, 1, 0.25)))
        back = TreePartition.from_json(t.to_json())
        assert back.leaves == t.leaves
        assert BoxPartition.from_json(t.partition().to_json()).boxes == t.leaves

    def test_graft(self):
        base = TreePartition(Box.unit(1), ((1, 0, 0.5),))
        sub = TreePartition(base.box(3), ((1, 0, 0.75), (2, 0, 0.6)))
        g = graft(base, 3, sub)
        assert g.n_leaves == 4
        np.testing.assert_allclose(sorted(b.hi[0] for b in g.leaves), [0.5, 0.6, 0.75, 1.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 3), st.integers(0, 12))
    def test_leaves_partition_root(self, seed, p, n_splits):
        rng = np.random.default_rng(seed)
        t = random_tree(rng, p, n_splits)
        assert abs(sum(b.volume for b in t.leaves) - 1.0) <= 1e-12
        x = rng.random((10_000, p))
        counts = np.sum([b.contains(x) for b in t.leaves], axis=0)
        np.testing.assert_array_equal(counts, 1)
        loc = t.locate(x)
        for i in range(0, 10_000, 997):
            assert t.leaves[loc[i]].contains(x[i])[0]
