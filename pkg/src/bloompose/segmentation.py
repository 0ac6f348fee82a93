"""Petal/pistil extraction from a flower candidate cloud via HSV thresholds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import PointCloud, centroid, empty_cloud, rgb_to_hsv_array
from .clustering import cluster_clouds, dbscan


class UnfittableFlowerError(RuntimeError):
    """A candidate has too few petal points to attempt any surface fit."""


@dataclass(frozen=True)
class HsvRange:
    """HSV acceptance window; hue wraps when hue_min > hue_max.

    Hue bounds are degrees; a window of (0, 360) accepts any hue. Saturation
    and value bounds lie in [0, 1] with min <= max.
    """

    hue_min: float = 0.0
    hue_max: float = 360.0
    sat_min: float = 0.0
    sat_max: float = 1.0
    val_min: float = 0.0
    val_max: float = 1.0

    def __post_init__(self) -> None:
        if self.sat_min > self.sat_max:
            raise ValueError("sat_min exceeds sat_max")
        if self.val_min > self.val_max:
            raise ValueError("val_min exceeds val_max")

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        """Boolean mask for an (..., 3) HSV array (hue in degrees)."""
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        if self.hue_min <= self.hue_max:
            hue_ok = (h >= self.hue_min) & (h <= self.hue_max)
        else:  # wrap-around window, e.g. [350, 10]
            hue_ok = (h >= self.hue_min) | (h <= self.hue_max)
        return (hue_ok
                & (s >= self.sat_min) & (s <= self.sat_max)
                & (v >= self.val_min) & (v <= self.val_max))


# Defaults tuned on the synthetic generator: petals are white (low
# saturation, bright), pistils yellow. Both are config-exposed.
WHITE_PETALS = HsvRange(sat_max=0.25, val_min=0.6)
YELLOW_PISTIL = HsvRange(hue_min=40.0, hue_max=70.0, sat_min=0.3, val_min=0.4)


@dataclass(frozen=True)
class SegmentationParams:
    petal_range: HsvRange = WHITE_PETALS
    pistil_range: HsvRange = YELLOW_PISTIL
    pistil_eps: float = 0.01
    pistil_min_points: int = 10
    min_petal_points: int = 30


@dataclass(frozen=True)
class FlowerSegment:
    """Per-flower petal and pistil clouds with their centroids."""

    petals: PointCloud
    pistil: PointCloud
    petal_centroid: np.ndarray
    pistil_centroid: Optional[np.ndarray]
    flower_centroid: np.ndarray


def filter_by_hsv(cloud: PointCloud, hsv_range: HsvRange) -> PointCloud:
    """Subset of points whose color falls inside the HSV window."""
    if len(cloud) == 0:
        return cloud
    return cloud.select(hsv_range.contains(rgb_to_hsv_array(cloud.colors)))


def select_pistil(candidates: PointCloud, petal_centroid: np.ndarray,
                  eps: float = 0.01, min_points: int = 10) -> PointCloud:
    """Picks the pistil among color-filtered candidates by proximity.

    Clusters the candidates with DBSCAN and returns the cluster whose
    centroid is nearest the petal centroid, which rejects spurious stem
    points that share the pistil's color. Empty candidates or an all-noise
    labeling yield an empty cloud.
    """
    if len(candidates) == 0:
        return empty_cloud()
    labeling = dbscan(candidates, eps=eps, min_points=min_points)
    if labeling.cluster_count == 0:
        return empty_cloud()
    clusters = cluster_clouds(candidates, labeling)
    distances = [float(np.linalg.norm(centroid(c) - petal_centroid)) for c in clusters]
    return clusters[int(np.argmin(distances))]


def segment_flower(flower: PointCloud, params: SegmentationParams = SegmentationParams()
                   ) -> FlowerSegment:
    """Splits a flower candidate into petal and pistil clouds.

    Raises:
        UnfittableFlowerError: fewer petal points than params.min_petal_points
            (the pipeline treats this as a recoverable skip).
        ValueError: empty input cloud.
    """
    if len(flower) == 0:
        raise ValueError("cannot segment an empty cloud")
    petals = filter_by_hsv(flower, params.petal_range)
    if len(petals) < params.min_petal_points:
        raise UnfittableFlowerError(
            f"{len(petals)} petal points < minimum {params.min_petal_points}")
    petal_centroid = centroid(petals)
    pistil = select_pistil(
        filter_by_hsv(flower, params.pistil_range), petal_centroid,
        eps=params.pistil_eps, min_points=params.pistil_min_points)
    return FlowerSegment(
        petals=petals,
        pistil=pistil,
        petal_centroid=petal_centroid,
        pistil_centroid=centroid(pistil) if len(pistil) else None,
        flower_centroid=centroid(flower),
    )
