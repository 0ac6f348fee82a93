"""Density clustering (DBSCAN) over 3D points and per-cluster bounding cuboids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud

NOISE = -1
_UNVISITED = -2


@dataclass(frozen=True)
class ClusterLabeling:
    """Per-point cluster labels aligned with the cloud; -1 marks noise."""

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def members(self, cluster: int) -> np.ndarray:
        """Ascending point indices of one cluster."""
        return np.flatnonzero(self.labels == cluster)


@dataclass(frozen=True)
class BBox3D:
    """Componentwise extrema of a cluster plus its member point indices."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    member_indices: np.ndarray

    def __post_init__(self) -> None:
        if len(self.member_indices) == 0:
            raise ValueError("a bounding cuboid needs at least one member")
        if not (np.asarray(self.min_corner) <= np.asarray(self.max_corner)).all():
            raise ValueError("min_corner exceeds max_corner")


def _neighbor_lists(positions: np.ndarray, eps: float) -> list[np.ndarray]:
    """Ascending eps-neighbor index lists (self included) for every point.

    Uses a uniform spatial hash of cell size eps: candidates come from the
    27 surrounding cells, and all points sharing a cell share one candidate
    array, so distances are evaluated in one (cell x candidates) matrix per
    occupied cell.
    """
    n = len(positions)
    cells = np.floor(positions / eps).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, cell in enumerate(map(tuple, cells)):
        grid.setdefault(cell, []).append(i)
    grid_arrays = {cell: np.asarray(ids, dtype=np.int64) for cell, ids in grid.items()}
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    eps2 = eps * eps
    result: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n
    for cell, members in grid_arrays.items():
        parts = []
        for off in offsets:
            near = grid_arrays.get((cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]))
            if near is not None:
                parts.append(near)
        cand = np.sort(np.concatenate(parts))
        cand_pos = positions[cand]
        rows_per_chunk = max(1, 2_000_000 // max(len(cand), 1))  # cap the distance matrix
        for start in range(0, len(members), rows_per_chunk):
            chunk = members[start:start + rows_per_chunk]
            diff = positions[chunk][:, None, :] - cand_pos[None, :, :]
            within = np.einsum("ijk,ijk->ij", diff, diff) <= eps2
            for row, idx in enumerate(chunk):
                result[idx] = cand[within[row]]
    return result


def dbscan(cloud: PointCloud, eps: float = 0.01, min_points: int = 20) -> ClusterLabeling:
    """Standard Euclidean DBSCAN with deterministic, order-stable labeling.

    A core point has at least min_points neighbors within eps (itself
    included); clusters are connected components of core points under
    eps-reachability; border points join the first cluster that reaches them
    in ascending seed order; everything else is noise (-1).

    Args:
        cloud: Points to cluster (colors are ignored).
        eps: Neighborhood radius in meters.
        min_points: Density threshold, self included.

    Returns:
        ClusterLabeling with labels in {-1, 0, ..., cluster_count - 1}.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if min_points < 1:
        raise ValueError(f"min_points must be >= 1, got {min_points}")
    n = len(cloud)
    if n == 0:
        return ClusterLabeling(np.empty(0, dtype=np.int64), 0)

    neighbors = _neighbor_lists(cloud.positions, eps)
    core = np.array([len(nb) >= min_points for nb in neighbors])
    labels = np.full(n, _UNVISITED, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if labels[seed] != _UNVISITED or not core[seed]:
            continue
        labels[seed] = cluster
        queue = [int(j) for j in neighbors[seed] if j != seed]
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] != _UNVISITED:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(int(m) for m in neighbors[j] if labels[m] == _UNVISITED)
        cluster += 1
    labels[labels == _UNVISITED] = NOISE
    return ClusterLabeling(labels, cluster)


def bounding_cuboids(cloud: PointCloud, labeling: ClusterLabeling) -> list[BBox3D]:
    """One cuboid per cluster (noise excluded); corners are member extrema."""
    if len(cloud) != len(labeling.labels):
        raise ValueError("labeling is not aligned with the cloud")
    cuboids = []
    for cluster in range(labeling.cluster_count):
        members = labeling.members(cluster)
        pts = cloud.positions[members]
        cuboids.append(BBox3D(pts.min(axis=0), pts.max(axis=0), members))
    return cuboids


def cluster_clouds(cloud: PointCloud, labeling: ClusterLabeling) -> list[PointCloud]:
    """Per-cluster sub-clouds in label order, noise dropped."""
    return [cloud.select(labeling.members(c)) for c in range(labeling.cluster_count)]


def labeling_to_dict(labeling: ClusterLabeling) -> dict:
    """JSON-ready debugging view of a labeling."""
    return {"cluster_count": labeling.cluster_count,
            "labels": [int(v) for v in labeling.labels]}
