"""Ball tree over flattened adapter vectors, with exact branch-and-bound k-NN."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


@dataclass
class BallNode:
    centroid: np.ndarray
    radius: float
    indices: np.ndarray  # every point index in the subtree
    depth: int
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


class BallTree:
    """Binary tree of hyperspheres; node 0 is the root.

    Each internal node splits its points at the midpoint of the range of the
    coordinate with the largest spread, so well-separated groups end up in
    different subtrees. Coincident points are split by index.
    """

    def __init__(self, points, leaf_size: int = 1):
        pts = np.array([getattr(p, "values", p) for p in points], dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("need a non-empty list of equal-length vectors")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.points = pts
        self.leaf_size = leaf_size
        self.nodes: list[BallNode] = []
        self._build(np.arange(len(pts)), 0)

    def _build(self, idx: np.ndarray, depth: int) -> int:
        sub = self.points[idx]
        centroid = sub.mean(axis=0)
        radius = float(np.sqrt(((sub - centroid) ** 2).sum(axis=1)).max())
        node_id = len(self.nodes)
        self.nodes.append(BallNode(centroid, radius, idx, depth))
        if len(idx) > self.leaf_size:
            spread = sub.max(axis=0) - sub.min(axis=0)
            dim = int(np.argmax(spread))
            coord = sub[:, dim]
            mask = coord <= (coord.min() + coord.max()) / 2
            if mask.all() or not mask.any():
                order = idx[np.lexsort((idx, coord))]
                mask = np.isin(idx, order[:len(order) // 2])
            left = self._build(idx[mask], depth + 1)
            right = self._build(idx[~mask], depth + 1)
            self.nodes[node_id].left, self.nodes[node_id].right = left, right
        return node_id

    def __len__(self) -> int:
        return len(self.points)

    @property
    def height(self) -> int:
        return max(n.depth for n in self.nodes)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def query(self, q: np.ndarray, k: int, exclude: int = -1) -> list[tuple[int, float]]:
        """k nearest stored points to ``q`` ordered by (distance, index)."""
        heap: list[tuple[float, int]] = []  # (-dist, -index): the root is the worst kept

        def worse_than_kept(dist: float, index: int) -> bool:
            return (dist, index) > (-heap[0][0], -heap[0][1])

        def visit(node_id: int):
            node = self.nodes[node_id]
            if len(heap) == k:
                lower = np.sqrt(((q - node.centroid) ** 2).sum()) - node.radius
                worst = -heap[0][0]
                # slack keeps exact-distance ties reachable despite rounding in the bound
                if lower > worst + 1e-12 * (1.0 + worst):
                    return
            if node.is_leaf:
                d = np.sqrt(((self.points[node.indices] - q) ** 2).sum(axis=1))
                for i, di in zip(node.indices.tolist(), d.tolist()):
                    if i == exclude:
                        continue
                    if len(heap) < k:
                        heapq.heappush(heap, (-di, -i))
                    elif not worse_than_kept(di, i):
                        heapq.heapreplace(heap, (-di, -i))
                return
            kids = [node.left, node.right]
            near = [np.sqrt(((q - self.nodes[c].centroid) ** 2).sum()) for c in kids]
            for c in (kids if near[0] <= near[1] else kids[::-1]):
                visit(c)

        if k > 0:
            visit(0)
        return sorted(((-i, -d) for d, i in heap), key=lambda t: (t[1], t[0]))


def build_ball_tree(points, leaf_size: int = 1) -> BallTree:
    return BallTree(points, leaf_size)


def knn(tree: BallTree, query_index: int, k: int) -> list[tuple[int, float]]:
    """k nearest *other* stored points to stored point ``query_index``."""
    n = len(tree)
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} out of range")
    if not 0 <= k <= n - 1:
        raise ValueError(f"k={k} must lie in [0, {n - 1}]")
    return tree.query(tree.points[query_index], k, exclude=query_index)


def cluster_cut(tree: BallTree, depth: int) -> dict[int, list[int]]:
    """Subtrees rooted at ``depth`` (or shallower leaves) as clusters, numbered left to right."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    clusters: dict[int, list[int]] = {}

    def walk(node_id: int):
        node = tree.nodes[node_id]
        if node.depth == depth or node.is_leaf:
            clusters[len(clusters)] = sorted(node.indices.tolist())
            return
        walk(node.left)
        walk(node.right)

    walk(0)
    return clusters
