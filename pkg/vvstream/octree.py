"""Octree over a point set with exact batched nearest-neighbour queries."""
from __future__ import annotations

import logging
from enum import IntEnum

import numpy as np

from vvstream.errors import EmptyCloudError
from vvstream.geometry import PointCloud

logger = logging.getLogger(__name__)

DEFAULT_LEAF_CAPACITY = 16
DEFAULT_MAX_DEPTH = 10


class Octant(IntEnum):
    """Child slot; bit 0 set on the high-x side, bit 1 high-y, bit 2 high-z."""

    LOW_X_LOW_Y_LOW_Z = 0
    HIGH_X_LOW_Y_LOW_Z = 1
    LOW_X_HIGH_Y_LOW_Z = 2
    HIGH_X_HIGH_Y_LOW_Z = 3
    LOW_X_LOW_Y_HIGH_Z = 4
    HIGH_X_LOW_Y_HIGH_Z = 5
    LOW_X_HIGH_Y_HIGH_Z = 6
    HIGH_X_HIGH_Y_HIGH_Z = 7


class OctreeNode:
    """One cell; `lo`/`hi` is the tight bounding box of the points below it."""

    __slots__ = ('index', 'lo', 'hi', 'center', 'children', 'depth')

    def __init__(self, index, points, depth):
        self.index = index
        self.lo = points.min(axis=0)
        self.hi = points.max(axis=0)
        self.center = (self.lo + self.hi) / 2
        self.children = []
        self.depth = depth

    @property
    def is_leaf(self):
        return not self.children

    def __len__(self):
        return len(self.index)


class Octree:
    def __init__(self, xyz, leaf_capacity=DEFAULT_LEAF_CAPACITY, max_depth=DEFAULT_MAX_DEPTH):
        self.points = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if not len(self.points):
            raise EmptyCloudError('cannot build an octree over zero points')
        self.leaf_capacity = leaf_capacity
        self.max_depth = max_depth
        self.node_count = 0
        self.root = self._build(np.arange(len(self.points)), 0)
        logger.debug(f'octree over {len(self.points)} points: {self.node_count} nodes')

    @classmethod
    def from_cloud(cls, cloud: PointCloud, **kwargs):
        return cls(cloud.xyz, **kwargs)

    def _build(self, index, depth):
        node = OctreeNode(index, self.points[index], depth)
        self.node_count += 1
        if len(index) <= self.leaf_capacity or depth >= self.max_depth:
            return node
        pts = self.points[index]
        code = ((pts[:, 0] >= node.center[0]).astype(np.int64)
                | ((pts[:, 1] >= node.center[1]).astype(np.int64) << 1)
                | ((pts[:, 2] >= node.center[2]).astype(np.int64) << 2))
        if (code == code[0]).all():
            # coincident points cannot be separated
            return node
        for octant in Octant:
            sel = index[code == octant]
            if len(sel):
                node.children.append(self._build(sel, depth + 1))
        return node

    def leaves(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(node.children)

    def query(self, queries, exclude_self=False):
        """Exact nearest neighbour of each query point: (distances, indices).

        With exclude_self, query i must be tree point i and is not its own match.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(q), np.inf)
        best_index = np.full(len(q), -1, dtype=np.int64)
        stack = [(self.root, np.arange(len(q)))]
        while stack:
            node, active = stack.pop()
            qa = q[active]
            gap = np.maximum(np.maximum(node.lo - qa, qa - node.hi), 0.0)
            bound = np.einsum('ij,ij->i', gap, gap)
            keep = bound < best[active]
            if not keep.any():
                continue
            active = active[keep]
            if node.is_leaf:
                diff = q[active, None, :] - self.points[node.index][None, :, :]
                d2 = np.einsum('ijk,ijk->ij', diff, diff)
                if exclude_self:
                    d2[active[:, None] == node.index[None, :]] = np.inf
                j = np.argmin(d2, axis=1)
                cand = d2[np.arange(len(active)), j]
                better = cand < best[active]
                best[active[better]] = cand[better]
                best_index[active[better]] = node.index[j[better]]
                continue
            # visit the child nearest to the active queries first
            centroid = q[active].mean(axis=0)
            order = sorted(node.children, key=lambda c: float(np.sum((c.center - centroid) ** 2)), reverse=True)
            stack.extend((child, active) for child in order)
        return np.sqrt(best), best_index


def nearest_distances(source: PointCloud, target: PointCloud, tree: Octree | None = None) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    if not len(source) or not len(target):
        raise EmptyCloudError('nearest-neighbour search needs two non-empty clouds')
    tree = tree or Octree.from_cloud(target)
    dist, _ = tree.query(source.xyz)
    return dist


def chamfer_distance(p: PointCloud, q: PointCloud) -> float:
    """Symmetric mean nearest-neighbour distance, each direction averaged on its own."""
    if not len(p) or not len(q):
        raise EmptyCloudError(f'chamfer distance of clouds with {len(p)} and {len(q)} points')
    forward = nearest_distances(p, q)
    backward = nearest_distances(q, p)
    return float(forward.mean() + backward.mean())
