import json

import numpy as np
import pytest

from bloompose.cloud import PointCloud
from bloompose.clustering import bounding_cuboids, cluster_clouds, dbscan, \
    labeling_to_dict

NOISE = -1


def reference_dbscan(positions, eps, min_points):
    """Brute-force O(n^2) DBSCAN with the same deterministic claiming rule."""
    n = len(positions)
    dists = np.linalg.norm(positions[:, None] - positions[None], axis=2)
    neighbors = [np.flatnonzero(dists[i] <= eps) for i in range(n)]
    core = [len(nb) >= min_points for nb in neighbors]
    labels = np.full(n, -2)
    cluster = 0
    for seed in range(n):
        if labels[seed] != -2 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = [j for j in neighbors[seed] if j != seed]
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(m for m in neighbors[j] if labels[m] == -2)
        cluster += 1
    labels[labels == -2] = NOISE
    return labels, cluster


def canonical(labels):
    """Relabels clusters by first appearance so labelings compare up to permutation."""
    mapping = {}
    out = []
    for lab in labels:
        if lab == NOISE:
            out.append(NOISE)
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return out


def gray_cloud(positions):
    positions = np.asarray(positions, dtype=np.float64)
    return PointCloud(positions, np.full((len(positions), 3), 0.5))


def two_ball_cloud(rng, n_each=25, separation=0.1, radius=0.005):
    a = rng.normal(size=(n_each, 3))
    a = a / np.linalg.norm(a, axis=1, keepdims=True) * radius * rng.uniform(0, 1, (n_each, 1))
    b = a.copy() + [separation, 0, 0]
    return gray_cloud(np.vstack([a, b]))


class TestDbscan:
    def test_empty_cloud(self):
        labeling = dbscan(gray_cloud(np.empty((0, 3))), eps=0.01, min_points=20)
        assert labeling.cluster_count == 0
        assert len(labeling.labels) == 0

    def test_two_separated_balls(self):
        rng = np.random.default_rng(2)
        cloud = two_ball_cloud(rng)
        labeling = dbscan(cloud, eps=0.01, min_points=20)
        ref_labels, ref_count = reference_dbscan(cloud.positions, 0.01, 20)
        assert labeling.cluster_count == 2
        assert not (labeling.labels == NOISE).any()
        assert canonical(labeling.labels) == canonical(ref_labels)

    def test_small_cluster_below_min_points_is_noise(self):
        rng = np.random.default_rng(3)
        ball = rng.normal(0, 0.002, (10, 3))
        labeling = dbscan(gray_cloud(ball), eps=0.01, min_points=20)
        assert labeling.cluster_count == 0
        assert (labeling.labels == NOISE).all()

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference_on_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 300))
        # a mix of dense blobs and scatter stresses core/border/noise paths
        blobs = [rng.normal(rng.uniform(-0.05, 0.05, 3), 0.004, (n // 3, 3))
                 for _ in range(2)]
        scatter = rng.uniform(-0.06, 0.06, (n - 2 * (n // 3), 3))
        cloud = gray_cloud(np.vstack(blobs + [scatter]))
        eps = float(rng.uniform(0.004, 0.02))
        min_points = int(rng.integers(2, 12))
        labeling = dbscan(cloud, eps=eps, min_points=min_points)
        ref_labels, ref_count = reference_dbscan(cloud.positions, eps, min_points)
        assert labeling.cluster_count == ref_count
        assert canonical(labeling.labels) == canonical(ref_labels)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(21)
        cloud = two_ball_cloud(rng)
        labeling = dbscan(cloud, eps=0.01, min_points=10)
        perm = rng.permutation(len(cloud))
        shuffled = cloud.select(perm)
        labeling_p = dbscan(shuffled, eps=0.01, min_points=10)
        # member sets must coincide cluster for cluster (up to label permutation)
        sets_a = {frozenset(np.flatnonzero(labeling.labels == c).tolist())
                  for c in range(labeling.cluster_count)}
        sets_b = {frozenset(perm[np.flatnonzero(labeling_p.labels == c)].tolist())
                  for c in range(labeling_p.cluster_count)}
        assert sets_a == sets_b

    def test_translation_invariance(self):
        rng = np.random.default_rng(23)
        cloud = two_ball_cloud(rng)
        moved = PointCloud(cloud.positions + [1.234, -0.56, 7.8], cloud.colors)
        a = dbscan(cloud, eps=0.01, min_points=10)
        b = dbscan(moved, eps=0.01, min_points=10)
        assert np.array_equal(a.labels, b.labels)

    def test_members_reach_a_core_point(self):
        rng = np.random.default_rng(29)
        cloud = two_ball_cloud(rng, n_each=30)
        eps, min_points = 0.01, 10
        labeling = dbscan(cloud, eps=eps, min_points=min_points)
        dists = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None], axis=2)
        core = (dists <= eps).sum(axis=1) >= min_points
        for i, lab in enumerate(labeling.labels):
            if lab == NOISE:
                continue
            same = labeling.labels == lab
            assert (dists[i][same & core] <= eps).any()

    def test_parameter_validation(self):
        cloud = gray_cloud([[0, 0, 0]])
        with pytest.raises(ValueError):
            dbscan(cloud, eps=0.0)
        with pytest.raises(ValueError):
            dbscan(cloud, eps=0.01, min_points=0)


class TestBoundingCuboids:
    def test_two_point_cluster_extrema(self):
        cloud = gray_cloud([[0, 0, 0], [1, 2, 3]])
        labeling = dbscan(cloud, eps=10.0, min_points=1)
        cuboids = bounding_cuboids(cloud, labeling)
        assert len(cuboids) == 1
        assert np.array_equal(cuboids[0].min_corner, [0, 0, 0])
        assert np.array_equal(cuboids[0].max_corner, [1, 2, 3])

    def test_all_noise_gives_empty_list(self):
        rng = np.random.default_rng(31)
        cloud = gray_cloud(rng.uniform(-1, 1, (10, 3)))
        labeling = dbscan(cloud, eps=1e-6, min_points=5)
        assert bounding_cuboids(cloud, labeling) == []

    def test_matches_per_cluster_extrema_scan(self):
        rng = np.random.default_rng(37)
        cloud = two_ball_cloud(rng, n_each=40)
        labeling = dbscan(cloud, eps=0.01, min_points=10)
        for cuboid, members in zip(bounding_cuboids(cloud, labeling),
                                   (labeling.members(c)
                                    for c in range(labeling.cluster_count))):
            pts = cloud.positions[members]
            assert np.array_equal(cuboid.min_corner, pts.min(axis=0))
            assert np.array_equal(cuboid.max_corner, pts.max(axis=0))
            assert np.array_equal(cuboid.member_indices, members)

    def test_cluster_clouds_align_with_labels(self):
        rng = np.random.default_rng(41)
        cloud = two_ball_cloud(rng)
        labeling = dbscan(cloud, eps=0.01, min_points=10)
        clouds = cluster_clouds(cloud, labeling)
        assert len(clouds) == labeling.cluster_count
        assert sum(len(c) for c in clouds) == int((labeling.labels != NOISE).sum())

    def test_labeling_exports_as_json(self):
        rng = np.random.default_rng(43)
        cloud = two_ball_cloud(rng)
        labeling = dbscan(cloud, eps=0.01, min_points=10)
        payload = json.loads(json.dumps(labeling_to_dict(labeling)))
        assert payload["cluster_count"] == labeling.cluster_count
        assert payload["labels"] == labeling.labels.tolist()
