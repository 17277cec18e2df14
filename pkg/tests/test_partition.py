"""Tests for the partitioning tree and landmark placement."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgrf.partition import (
    RANDOM_SUBSAMPLE,
    RANDOM_UNIFORM,
    REGULAR_GRID,
    BoundingBox,
    build_tree,
    deserialize_tree,
    load_tree,
    place_landmarks,
    save_tree,
    serialize_tree,
)


def leaf_size_oracle(m, rank):
    """Leaf sizes of a median split, recursing on counts alone."""
    if m < 2 * rank:
        return [m]
    hi = (m + 1) // 2
    return leaf_size_oracle(hi, rank) + leaf_size_oracle(m - hi, rank)


def height_oracle(m, rank):
    if m < 2 * rank:
        return 0
    hi = (m + 1) // 2
    return 1 + max(height_oracle(hi, rank), height_oracle(m - hi, rank))


class TestBuildTree:
    """Construction shape, balance, and error paths."""

    def test_perfect_grid_four_leaves(self):
        """n = 4r gridded sites give a height-2 tree with 4 leaves of r sites."""
        r = 4
        g = np.linspace(0.0, 1.0, 4)
        X = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        tree = build_tree(X, rank=r)
        assert tree.height == 2
        leaves = tree.leaves
        assert len(leaves) == 4
        assert all(nd.nsites == r for nd in leaves)

    def test_n_equals_rank_single_node(self):
        """n = r yields a single-node tree: the root is a leaf, no landmarks."""
        X = np.random.default_rng(0).random((4, 2))
        tree = build_tree(X, rank=4)
        assert len(tree.nodes) == 1
        assert tree.root.is_leaf
        assert tree.root.landmarks is None
        assert tree.height == 0

    def test_thousand_sites_rank_125(self):
        """n=1000, r=125 gives height 3 with leaf sizes matching a size oracle."""
        X = np.random.default_rng(1).random((1000, 2))
        tree = build_tree(X, rank=125)
        assert tree.height == height_oracle(1000, 125) == 3
        sizes = sorted(nd.nsites for nd in tree.leaves)
        assert sizes == sorted(leaf_size_oracle(1000, 125))
        assert all(125 <= s < 250 for s in sizes)

    def test_split_halves_differ_by_at_most_one(self):
        """Every split divides a node's sites into near-equal halves."""
        X = np.random.default_rng(2).random((157, 2))
        tree = build_tree(X, rank=8)
        for nd in tree.nodes:
            if nd.is_leaf:
                continue
            counts = [tree.nodes[c].nsites for c in nd.children]
            assert sum(counts) == nd.nsites
            assert abs(counts[0] - counts[1]) <= 1

    def test_duplicate_sites_rejected(self):
        X = np.array([[0.1, 0.2], [0.3, 0.4], [0.1, 0.2], [0.5, 0.6]])
        with pytest.raises(ValueError, match="duplicate"):
            build_tree(X, rank=2)

    def test_too_few_sites_rejected(self):
        X = np.random.default_rng(3).random((3, 2))
        with pytest.raises(ValueError):
            build_tree(X, rank=4)
        with pytest.raises(ValueError):
            build_tree(X, rank=1)

    def test_determinism_bitwise(self):
        """Identical inputs and seed reproduce the serialized tree exactly."""
        X = np.random.default_rng(4).random((60, 2))
        a = build_tree(X, rank=5, strategy=RANDOM_UNIFORM, seed=11)
        b = build_tree(X, rank=5, strategy=RANDOM_UNIFORM, seed=11)
        assert serialize_tree(a) == serialize_tree(b)

    def test_permutation_round_trip(self):
        """to_tree_order then from_tree_order is the identity, rows included."""
        X = np.random.default_rng(5).random((37, 2))
        tree = build_tree(X, rank=3)
        v = np.random.default_rng(6).random(37)
        assert np.array_equal(tree.from_tree_order(tree.to_tree_order(v)), v)
        M = np.random.default_rng(7).random((37, 4))
        assert np.array_equal(tree.from_tree_order(tree.to_tree_order(M)), M)
        assert np.array_equal(tree.to_tree_order(X), tree.sites)

    def test_nested_boxes_and_ranges(self):
        """Child boxes sit inside parent boxes; child ranges tile the parent."""
        X = np.random.default_rng(8).random((90, 3))
        tree = build_tree(X, rank=4)
        for nd in tree.nodes:
            if nd.is_leaf:
                continue
            kids = [tree.nodes[c] for c in nd.children]
            assert kids[0].begin == nd.begin and kids[-1].end == nd.end
            for a, b in zip(kids, kids[1:]):
                assert a.end == b.begin
            for k in kids:
                assert np.all(k.box.lo >= nd.box.lo - 1e-15)
                assert np.all(k.box.hi <= nd.box.hi + 1e-15)

    def test_sites_inside_leaf_boxes(self):
        X = np.random.default_rng(9).random((64, 2))
        tree = build_tree(X, rank=4)
        for nd in tree.leaves:
            for x in tree.node_sites(nd):
                assert nd.box.contains(x)

    def test_lca_and_ancestors(self):
        """Lowest common ancestor agrees with intersecting ancestor chains."""
        X = np.random.default_rng(10).random((120, 2))
        tree = build_tree(X, rank=4)
        leaves = tree.leaves
        for a in leaves[:4]:
            for b in leaves[-4:]:
                g = tree.lca(a.id, b.id)
                pa = {a.id, *tree.ancestors(a.id)}
                pb = {b.id, *tree.ancestors(b.id)}
                common = pa & pb
                assert g in common
                assert all(g not in tree.ancestors(c) for c in common - {g})


class TestPlaceLandmarks:
    """Layouts of the three landmark strategies."""

    def unit_box(self):
        return BoundingBox(np.zeros(2), np.ones(2))

    def test_regular_grid_two_by_two(self):
        """Unit square with r=4 puts landmarks at the four cell centers."""
        pts = place_landmarks(self.unit_box(), 4, REGULAR_GRID)
        want = {(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)}
        assert {tuple(p) for p in np.round(pts, 12)} == want

    def test_regular_grid_single_point_is_center(self):
        pts = place_landmarks(self.unit_box(), 1, REGULAR_GRID)
        assert pts.shape == (1, 2)
        assert np.allclose(pts[0], [0.5, 0.5])

    def test_regular_grid_truncation(self):
        """r=5 on the unit square: 3x2 lattice cut to 5 distinct interior points."""
        box = self.unit_box()
        pts = place_landmarks(box, 5, REGULAR_GRID)
        assert pts.shape == (5, 2)
        assert len({tuple(p) for p in pts}) == 5
        for p in pts:
            assert box.contains(p)
        # the two cells adjacent to the center survive truncation
        kept = {tuple(np.round(p, 12)) for p in pts}
        assert (0.5, 0.25) in kept and (0.5, 0.75) in kept

    def test_regular_grid_proportional_counts(self):
        """An elongated box gets more grid points along its long side."""
        box = BoundingBox(np.zeros(2), np.array([4.0, 1.0]))
        pts = place_landmarks(box, 4, REGULAR_GRID)
        assert len(set(np.round(pts[:, 0], 12))) == 4
        assert len(set(np.round(pts[:, 1], 12))) == 1

    def test_random_uniform_inside_box(self):
        box = BoundingBox(np.array([1.0, -2.0]), np.array([2.0, 3.0]))
        pts = place_landmarks(box, 7, RANDOM_UNIFORM, seed=3)
        assert pts.shape == (7, 2)
        for p in pts:
            assert box.contains(p)
        again = place_landmarks(box, 7, RANDOM_UNIFORM, seed=3)
        assert np.array_equal(pts, again)

    def test_random_subsample_draws_sites(self):
        rng = np.random.default_rng(11)
        X = rng.random((30, 2))
        pts = place_landmarks(self.unit_box(), 6, RANDOM_SUBSAMPLE, seed=5,
                              sites_in_box=X, avoid=np.empty((0, 2)))
        keys = {row.tobytes() for row in X}
        assert all(p.tobytes() in keys for p in np.ascontiguousarray(pts))

    def test_random_subsample_needs_enough_sites(self):
        with pytest.raises(ValueError):
            place_landmarks(self.unit_box(), 6, RANDOM_SUBSAMPLE, seed=0,
                            sites_in_box=np.random.default_rng(0).random((3, 2)))

    def test_collision_with_site_is_perturbed(self):
        """A landmark that lands bitwise on a site is nudged off it."""
        box = self.unit_box()
        clash = np.array([[0.25, 0.25]])
        pts = place_landmarks(box, 4, REGULAR_GRID, avoid=clash)
        keys = {row.tobytes() for row in np.ascontiguousarray(pts)}
        assert clash[0].tobytes() not in keys
        assert all(box.contains(p) for p in pts)
        assert min(np.linalg.norm(pts - clash[0], axis=1)) < 1e-6


class TestSerialization:
    """Text round trip for trees."""

    def test_round_trip_bitwise(self):
        X = np.random.default_rng(12).random((73, 2))
        tree = build_tree(X, rank=4, strategy=RANDOM_UNIFORM, seed=9)
        back = deserialize_tree(serialize_tree(tree))
        assert np.array_equal(back.sites, tree.sites)
        assert np.array_equal(back.perm, tree.perm)
        assert back.rank == tree.rank
        assert len(back.nodes) == len(tree.nodes)
        for a, b in zip(tree.nodes, back.nodes):
            assert (a.id, a.parent, a.begin, a.end, a.children) == (
                b.id, b.parent, b.begin, b.end, b.children)
            assert np.array_equal(a.box.lo, b.box.lo)
            assert np.array_equal(a.box.hi, b.box.hi)
            if not a.is_leaf:
                assert np.array_equal(a.landmarks, b.landmarks)
        assert serialize_tree(back) == serialize_tree(tree)

    def test_file_round_trip(self, tmp_path):
        X = np.random.default_rng(13).random((40, 2))
        tree = build_tree(X, rank=3)
        path = tmp_path / "tree.txt"
        save_tree(tree, path)
        assert serialize_tree(load_tree(path)) == serialize_tree(tree)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            deserialize_tree("not a tree\n")


class TestTreeProperties:
    """Randomized structural invariants."""

    @given(
        n=st.integers(8, 120),
        rank=st.integers(2, 8),
        d=st.integers(1, 3),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_invariants(self, n, rank, d, seed):
        """Leaf sizes, permutation bijection, and range tiling always hold."""
        if n < rank:
            n = rank
        X = np.random.default_rng(seed).random((n, d))
        tree = build_tree(X, rank=rank)
        assert sorted(tree.perm.tolist()) == list(range(n))
        spans = sorted((nd.begin, nd.end) for nd in tree.leaves)
        assert spans[0][0] == 0 and spans[-1][1] == n
        assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
        for nd in tree.leaves:
            assert rank <= nd.nsites < 2 * rank
        for nd in tree.nodes:
            if not nd.is_leaf:
                assert nd.landmarks.shape == (rank, d)
                assert all(nd.box.contains(p) for p in nd.landmarks)
