"""Frame-quality scoring and binned best-frame selection for image sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

_LAPLACIAN_3X3 = np.array([[0.0, 1.0, 0.0],
                           [1.0, -4.0, 1.0],
                           [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    sharpness: float

    def __post_init__(self) -> None:
        if self.sharpness < 0:
            raise ValueError("sharpness must be >= 0")


def sharpness_score(image: np.ndarray, center_fraction: float = 0.5) -> float:
    """Variance of the 3x3 discrete Laplacian over the central crop.

    ``center_fraction`` is the per-side fraction of the image kept (0.5 keeps
    the central quarter by area). Border handling mirrors the image edge.

    Raises:
        ValueError: the cropped region is smaller than 3x3, or the fraction
            is outside (0, 1].
    """
    if not (0.0 < center_fraction <= 1.0):
        raise ValueError(f"center_fraction must be in (0, 1], got {center_fraction}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {image.shape}")
    h, w = image.shape
    crop_h = max(1, round(h * center_fraction))
    crop_w = max(1, round(w * center_fraction))
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    crop = image[top:top + crop_h, left:left + crop_w]
    if crop.shape[0] < 3 or crop.shape[1] < 3:
        raise ValueError(
            f"central crop {crop.shape} too small for the 3x3 Laplacian")
    response = convolve(crop, _LAPLACIAN_3X3, mode="mirror")
    return float(response.var())


def select_frames(scores: list[FrameScore], n_bins: int) -> list[int]:
    """Best frame index from each of n_bins contiguous, maximally-equal bins.

    Frames are ordered by index, split so that the first (count mod n_bins)
    bins hold one extra frame, and each bin contributes its sharpest frame
    (lowest index on ties). The output is strictly increasing.

    Raises:
        ValueError: empty scores, n_bins < 1, or n_bins > frame count.
    """
    if not scores:
        raise ValueError("no frame scores given")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if n_bins > len(scores):
        raise ValueError(f"n_bins {n_bins} exceeds frame count {len(scores)}")
    ordered = sorted(scores, key=lambda s: s.frame_index)
    base, extra = divmod(len(ordered), n_bins)
    selected = []
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        bin_scores = ordered[start:start + size]
        best = max(bin_scores, key=lambda s: s.sharpness)
        # max() keeps the earliest on ties because the bin is index-ordered
        selected.append(best.frame_index)
        start += size
    return selected
