"""Synthetic flowering-plant scenes with exact ground truth.

Every generated point carries a role tag (petal / pistil / foliage / ground)
and a flower id, so detection and segmentation can be scored mechanically.
Randomness comes from NumPy's PCG64 generator seeded explicitly, making
scenes reproducible bit for bit across platforms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import Aabb, PointCloud, concat_clouds, hsv_to_rgb_array, save_ply
from .evaluation import GroundTruthLabel, save_labels

PETAL = "petal"
PISTIL = "pistil"
FOLIAGE = "foliage"
GROUND = "ground"


@dataclass(frozen=True)
class SyntheticFlowerSpec:
    """Geometry of one generated flower.

    The petal surface is a cupped disk: height above the disk plane is
    ``cup_curvature * r^2 / petal_radius``, so a positive curvature cups
    toward the flower direction (the paraboloid-friendly case) and a negative
    one droops away from it. The pistil is a small ball offset along the
    direction, past the petal surface's mean height.
    """

    center: np.ndarray
    direction: np.ndarray
    petal_radius: float = 0.025
    cup_curvature: float = 0.4
    pistil_radius: float = 0.004
    point_density: float = 200_000.0  # points per square meter of petal disk

    def __post_init__(self) -> None:
        if self.petal_radius <= 0 or self.pistil_radius <= 0:
            raise ValueError("radii must be positive")
        if self.point_density <= 0:
            raise ValueError("point_density must be positive")
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(direction)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit length, got norm {norm}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "direction", direction / norm)


@dataclass(frozen=True)
class PointMembership:
    """Per-point role tags aligned with a cloud; flower_id is -1 off-flower."""

    roles: np.ndarray
    flower_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class SyntheticScene:
    cloud: PointCloud
    labels: list[GroundTruthLabel]
    membership: PointMembership


def _orthonormal_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to direction."""
    ref = np.array([1.0, 0.0, 0.0])
    if abs(direction @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    x = ref - (ref @ direction) * direction
    x /= np.linalg.norm(x)
    return x, np.cross(direction, x)


def _disk_points(rng: np.random.Generator, n: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    r = radius * np.sqrt(rng.uniform(size=n))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return r * np.cos(angle), r * np.sin(angle)


def _ball_points(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)


def make_flower(spec: SyntheticFlowerSpec, noise_sigma: float = 0.0,
                seed: int = 0) -> tuple[PointCloud, PointMembership]:
    """One flower: white cupped petal disk plus yellow pistil ball.

    Petal colors jitter in HSV around white (low saturation, high value),
    pistil colors around yellow. Gaussian position noise of ``noise_sigma``
    meters is applied to every point. Deterministic for a fixed seed.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    x_axis, y_axis = _orthonormal_frame(spec.direction)

    n_petal = max(50, round(spec.point_density * np.pi * spec.petal_radius ** 2))
    px, py = _disk_points(rng, n_petal, spec.petal_radius)
    pz = spec.cup_curvature * (px ** 2 + py ** 2) / spec.petal_radius
    petal_pos = (spec.center
                 + px[:, None] * x_axis + py[:, None] * y_axis
                 + pz[:, None] * spec.direction)
    petal_hsv = np.column_stack([
        rng.uniform(0.0, 360.0, n_petal),
        rng.uniform(0.0, 0.08, n_petal),
        rng.uniform(0.92, 1.0, n_petal),
    ])

    n_pistil = max(25, round(4.0 * spec.point_density * np.pi * spec.pistil_radius ** 2))
    offset = max(0.0, spec.cup_curvature) * spec.petal_radius / 2.0 + 2.0 * spec.pistil_radius
    pistil_pos = (spec.center + offset * spec.direction
                  + _ball_points(rng, n_pistil, spec.pistil_radius))
    pistil_hsv = np.column_stack([
        rng.uniform(50.0, 60.0, n_pistil),
        rng.uniform(0.75, 0.95, n_pistil),
        rng.uniform(0.75, 0.95, n_pistil),
    ])

    positions = np.vstack([petal_pos, pistil_pos])
    if noise_sigma > 0:
        positions = positions + rng.normal(0.0, noise_sigma, positions.shape)
    colors = np.clip(hsv_to_rgb_array(np.vstack([petal_hsv, pistil_hsv])), 0.0, 1.0)
    membership = PointMembership(
        roles=np.array([PETAL] * n_petal + [PISTIL] * n_pistil),
        flower_ids=np.zeros(n_petal + n_pistil, dtype=np.int64),
    )
    return PointCloud(positions, colors), membership


def _leaf(rng: np.random.Generator, center: np.ndarray, radius: float,
          density: float) -> np.ndarray:
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    x_axis, y_axis = _orthonormal_frame(normal)
    n = max(40, round(density * np.pi * radius ** 2))
    lx, ly = _disk_points(rng, n, radius)
    return center + lx[:, None] * x_axis + ly[:, None] * y_axis


def make_plant(n_flowers: int, bed: Aabb, foliage_density: float = 100_000.0,
               seed: int = 0, petal_radius: float = 0.025,
               pistil_radius: float = 0.004, point_density: float = 200_000.0,
               noise_sigma: float = 0.0005,
               curvature_range: tuple[float, float] = (-0.6, 0.9)) -> SyntheticScene:
    """A flowering plant: flowers, green leaf clutter, and a brown ground slab.

    Flower centers keep pairwise distance >= 4 * petal_radius and leaves stay
    3 * petal_radius away from flower centers, so detection and segmentation
    failures are attributable. Foliage hue sits in [90, 140] degrees, outside
    both the petal and pistil filters. ``foliage_density`` is points per
    cubic meter of bed volume.

    Raises:
        ValueError: n_flowers < 0, or the bed cannot host that many flowers
            at the required spacing.
    """
    if n_flowers < 0:
        raise ValueError("n_flowers must be >= 0")
    rng = np.random.default_rng(seed)
    extent = bed.max_corner - bed.min_corner

    margin = petal_radius
    lo = bed.min_corner + margin
    hi = bed.max_corner - margin
    if n_flowers > 0 and (hi <= lo).any():
        raise ValueError("bed too small for even one flower at the petal radius")
    z_lo = bed.min_corner[2] + 0.45 * extent[2]
    z_hi = bed.min_corner[2] + 0.85 * extent[2]

    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < n_flowers:
        attempts += 1
        if attempts > 200 * max(n_flowers, 1):
            raise ValueError(
                f"bed too small to place {n_flowers} flowers "
                f"{4 * petal_radius:.3f} m apart")
        candidate = np.array([
            rng.uniform(lo[0], hi[0]),
            rng.uniform(lo[1], hi[1]),
            rng.uniform(z_lo, z_hi),
        ])
        if all(np.linalg.norm(candidate - c) >= 4 * petal_radius for c in centers):
            centers.append(candidate)

    tilts = rng.uniform(0.0, np.radians(35.0), n_flowers)
    azimuths = rng.uniform(0.0, 2.0 * np.pi, n_flowers)
    curvatures = rng.uniform(curvature_range[0], curvature_range[1], n_flowers)
    flower_seeds = rng.integers(0, 2 ** 63, n_flowers)

    clouds: list[PointCloud] = []
    roles: list[np.ndarray] = []
    flower_ids: list[np.ndarray] = []
    labels: list[GroundTruthLabel] = []
    for i, center in enumerate(centers):
        direction = np.array([
            np.sin(tilts[i]) * np.cos(azimuths[i]),
            np.sin(tilts[i]) * np.sin(azimuths[i]),
            np.cos(tilts[i]),
        ])
        spec = SyntheticFlowerSpec(center=center, direction=direction,
                                   petal_radius=petal_radius,
                                   cup_curvature=float(curvatures[i]),
                                   pistil_radius=pistil_radius,
                                   point_density=point_density)
        flower, membership = make_flower(spec, noise_sigma=noise_sigma,
                                         seed=int(flower_seeds[i]))
        clouds.append(flower)
        roles.append(membership.roles)
        flower_ids.append(np.full(len(flower), i, dtype=np.int64))
        labels.append(GroundTruthLabel(id=f"flower_{i:03d}", position=center,
                                       direction=direction))

    # Leaf clutter. Each leaf is a flat random-oriented disk; the total point
    # budget is foliage_density * bed volume.
    volume = float(np.prod(extent))
    foliage_target = round(foliage_density * volume)
    foliage_parts: list[np.ndarray] = []
    foliage_total = 0
    placements_left = 100 + 10 * (foliage_target // 40 + 1)  # bed may be mostly flowers
    while foliage_total < foliage_target and placements_left > 0:
        placements_left -= 1
        leaf_radius = rng.uniform(0.015, 0.03)
        center = np.array([rng.uniform(bed.min_corner[k], bed.max_corner[k])
                           for k in range(3)])
        if any(np.linalg.norm(center - c) < 3 * petal_radius for c in centers):
            continue
        leaf = _leaf(rng, center, leaf_radius, point_density / 2.0)
        foliage_parts.append(leaf)
        foliage_total += len(leaf)
    if foliage_parts:
        foliage_pos = np.vstack(foliage_parts)
        if noise_sigma > 0:
            foliage_pos = foliage_pos + rng.normal(0.0, noise_sigma, foliage_pos.shape)
        foliage_hsv = np.column_stack([
            rng.uniform(90.0, 140.0, len(foliage_pos)),
            rng.uniform(0.4, 0.8, len(foliage_pos)),
            rng.uniform(0.3, 0.6, len(foliage_pos)),
        ])
        clouds.append(PointCloud(foliage_pos,
                                 np.clip(hsv_to_rgb_array(foliage_hsv), 0.0, 1.0)))
        roles.append(np.array([FOLIAGE] * len(foliage_pos)))
        flower_ids.append(np.full(len(foliage_pos), -1, dtype=np.int64))

    # Thin brown ground slab across the bed footprint.
    area = float(extent[0] * extent[1])
    n_ground = round(point_density / 4.0 * area)
    if n_ground > 0:
        ground_pos = np.column_stack([
            rng.uniform(bed.min_corner[0], bed.max_corner[0], n_ground),
            rng.uniform(bed.min_corner[1], bed.max_corner[1], n_ground),
            rng.uniform(bed.min_corner[2], bed.min_corner[2] + 0.004, n_ground),
        ])
        ground_hsv = np.column_stack([
            rng.uniform(20.0, 35.0, n_ground),
            rng.uniform(0.5, 0.75, n_ground),
            rng.uniform(0.25, 0.45, n_ground),
        ])
        clouds.append(PointCloud(ground_pos,
                                 np.clip(hsv_to_rgb_array(ground_hsv), 0.0, 1.0)))
        roles.append(np.array([GROUND] * n_ground))
        flower_ids.append(np.full(n_ground, -1, dtype=np.int64))

    cloud = concat_clouds(clouds)
    membership = PointMembership(
        roles=np.concatenate(roles) if roles else np.empty(0, dtype="<U7"),
        flower_ids=(np.concatenate(flower_ids) if flower_ids
                    else np.empty(0, dtype=np.int64)),
    )
    return SyntheticScene(cloud=cloud, labels=labels, membership=membership)


def save_membership_csv(membership: PointMembership, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "role", "flower_id"])
        for i, (role, fid) in enumerate(zip(membership.roles, membership.flower_ids)):
            writer.writerow([i, role, int(fid)])


def load_membership_csv(path: str | Path) -> PointMembership:
    roles, flower_ids = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            roles.append(row["role"])
            flower_ids.append(int(row["flower_id"]))
    return PointMembership(roles=np.array(roles),
                           flower_ids=np.array(flower_ids, dtype=np.int64))


def save_scene(scene: SyntheticScene, out_dir: str | Path) -> dict[str, Path]:
    """Writes scene.ply, ground_truth.json, and membership.csv into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "cloud": out_dir / "scene.ply",
        "labels": out_dir / "ground_truth.json",
        "membership": out_dir / "membership.csv",
    }
    save_ply(scene.cloud, paths["cloud"], binary=True)
    save_labels(scene.labels, paths["labels"])
    save_membership_csv(scene.membership, paths["membership"])
    return paths
