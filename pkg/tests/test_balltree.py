import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfat.balltree import build_ball_tree, cluster_cut, knn


def brute_knn(points, i, k):
    d = [(float(np.sqrt(((points[j] - points[i]) ** 2).sum())), j) for j in range(len(points)) if j != i]
    return [(j, dist) for dist, j in sorted(d)[:k]]


def assert_containment(tree):
    for node in tree.nodes:
        d = np.sqrt(((tree.points[node.indices] - node.centroid) ** 2).sum(axis=1))
        assert np.all(d <= node.radius + 1e-9)


def assert_partition(tree):
    leaf_pts = np.concatenate([n.indices for n in tree.leaves()])
    assert sorted(leaf_pts.tolist()) == list(range(len(tree)))


def test_single_point():
    tree = build_ball_tree([np.array([1.0, 2.0])])
    assert len(tree.nodes) == 1 and tree.nodes[0].radius == 0.0 and tree.nodes[0].is_leaf


def test_collinear_points():
    tree = build_ball_tree(np.array([[0.0], [1.0], [2.0], [3.0]]), leaf_size=1)
    assert_containment(tree)
    assert_partition(tree)
    assert all(len(leaf.indices) == 1 for leaf in tree.leaves())


def test_random_high_dim_containment():
    pts = np.random.default_rng(0).normal(size=(200, 64))
    tree = build_ball_tree(pts, leaf_size=3)
    assert_containment(tree)
    assert_partition(tree)


def test_knn_small_example():
    tree = build_ball_tree(np.array([[0.0], [1.0], [3.0]]))
    assert knn(tree, 0, 1) == [(1, 1.0)]


def test_knn_all_others_sorted():
    pts = np.random.default_rng(1).normal(size=(12, 3))
    tree = build_ball_tree(pts)
    res = knn(tree, 4, 11)
    assert sorted(i for i, _ in res) == [i for i in range(12) if i != 4]
    assert [d for _, d in res] == sorted(d for _, d in res)


def test_knn_range_errors():
    tree = build_ball_tree(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        knn(tree, 0, 3)


def test_knn_ties_prefer_lower_index():
    pts = np.array([[0.0], [1.0], [-1.0], [1.0], [-1.0]])
    tree = build_ball_tree(pts)
    assert knn(tree, 0, 2) == [(1, 1.0), (2, 1.0)]


def test_knn_random_queries_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(500):
        n = int(rng.integers(2, 60))
        pts = rng.normal(size=(n, int(rng.integers(1, 32))))
        tree = build_ball_tree(pts, leaf_size=int(rng.integers(1, 5)))
        i, k = int(rng.integers(n)), int(rng.integers(1, n))
        got, want = knn(tree, i, k), brute_knn(pts, i, k)
        assert [j for j, _ in got] == [j for j, _ in want]
        np.testing.assert_allclose([d for _, d in got], [d for _, d in want], atol=1e-9, rtol=0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 40), dim=st.integers(1, 8))
def test_tree_invariants_property(seed, n, dim):
    rng = np.random.default_rng(seed)
    # duplicated rows exercise the coincident-point split
    pts = np.round(rng.normal(size=(n, dim)), 1)
    tree = build_ball_tree(pts)
    assert_containment(tree)
    assert_partition(tree)


def test_cut_depth_zero_is_one_cluster():
    pts = np.random.default_rng(3).normal(size=(9, 2))
    assert cluster_cut(build_ball_tree(pts), 0) == {0: list(range(9))}


def test_cut_deeper_than_tree_gives_leaves():
    pts = np.random.default_rng(4).normal(size=(9, 2))
    tree = build_ball_tree(pts, leaf_size=2)
    clusters = cluster_cut(tree, tree.height + 3)
    assert sorted(map(sorted, clusters.values())) == sorted(sorted(l.indices.tolist()) for l in tree.leaves())


def test_cut_two_blobs():
    pts = np.array([[0.0], [0.1], [0.2], [10.0], [10.1]])
    clusters = cluster_cut(build_ball_tree(pts), 1)
    assert sorted(clusters.values()) == [[0, 1, 2], [3, 4]]


@pytest.mark.parametrize("depth", [0, 1, 2, 3])
def test_cut_partitions_clients(depth):
    pts = np.random.default_rng(5).normal(size=(15, 4))
    clusters = cluster_cut(build_ball_tree(pts), depth)
    assert len(clusters) <= 2 ** depth
    assert sorted(i for m in clusters.values() for i in m) == list(range(15))
