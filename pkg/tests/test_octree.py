import numpy as np
import pytest
from scipy.spatial import distance_matrix

from vvstream.errors import EmptyCloudError
from vvstream.geometry import PointCloud
from vvstream.octree import Octree, chamfer_distance, nearest_distances

from conftest import random_cloud


def brute_chamfer(p, q):
    d = distance_matrix(p.xyz, q.xyz)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


class TestOctree:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(500, 3))
        queries = rng.normal(size=(200, 3))
        dist, idx = Octree(points, leaf_capacity=8).query(queries)
        d = distance_matrix(queries, points)
        np.testing.assert_allclose(dist, d.min(axis=1), atol=1e-12)
        np.testing.assert_allclose(dist, d[np.arange(200), idx], atol=1e-12)

    def test_exclude_self(self):
        points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        dist, idx = Octree(points, leaf_capacity=1).query(points, exclude_self=True)
        np.testing.assert_allclose(dist, [1.0, 1.0, 2.0])
        assert idx.tolist() == [1, 0, 1]

    def test_coincident_points(self):
        tree = Octree(np.zeros((40, 3)), leaf_capacity=4)
        assert len(list(tree.leaves())) == 1
        dist, _ = tree.query([[0.0, 0.0, 2.0]])
        assert dist[0] == pytest.approx(2.0)

    def test_leaves_partition_points(self):
        rng = np.random.default_rng(3)
        tree = Octree(rng.uniform(size=(300, 3)), leaf_capacity=10)
        seen = np.concatenate([leaf.index for leaf in tree.leaves()])
        assert sorted(seen.tolist()) == list(range(300))

    def test_empty(self):
        with pytest.raises(EmptyCloudError):
            Octree(np.empty((0, 3)))


class TestChamferDistance:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            p = random_cloud(rng, int(rng.integers(1, 60)))
            q = random_cloud(rng, int(rng.integers(1, 60)), scale=1.5)
            assert chamfer_distance(p, q) == pytest.approx(brute_chamfer(p, q), abs=1e-9)

    def test_identical_clouds(self):
        cloud = random_cloud(np.random.default_rng(1), 100)
        assert chamfer_distance(cloud, cloud) == 0.0

    def test_directions_averaged_separately(self):
        p = PointCloud(np.array([[0.0, 0.0, 0.0]]), np.zeros((1, 3)))
        q = PointCloud(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), np.zeros((3, 3)))
        assert chamfer_distance(p, q) == pytest.approx(1.0 + 2.0)

    def test_empty_cloud(self):
        cloud = random_cloud(np.random.default_rng(1), 5)
        with pytest.raises(EmptyCloudError):
            chamfer_distance(cloud, PointCloud.empty())
        with pytest.raises(EmptyCloudError):
            nearest_distances(PointCloud.empty(), cloud)
