"""Depth-resolved orthographic views of a point cloud and their inversion.

A sweeping 2D grid captures, per pixel, the first point encountered along
one of the six axis-aligned view directions. The raster (dilated for the
detector's benefit) and the pixel->point grid together allow 2D detections
to be lifted back into 3D.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.ndimage import distance_transform_edt

from .cloud import PointCloud
from .detection import BBox2D

BACKGROUND_GRAY = 128  # blank raster value; fails the white-petal filter

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

# In-plane axes and their signs, per view: (axis1, sign1, axis2, sign2) where
# axis1 runs along raster columns and axis2 along rows. Signs make every view
# right-handed as seen by a viewer at sign * infinity on the view axis (world
# +Z up for side views, +Y "north" for the top and bottom views).
_VIEW_BASIS = {
    ("x", 1): ("y", 1, "z", -1),
    ("x", -1): ("y", -1, "z", -1),
    ("y", 1): ("x", -1, "z", -1),
    ("y", -1): ("x", 1, "z", -1),
    ("z", 1): ("x", 1, "y", -1),
    ("z", -1): ("x", -1, "y", -1),
}


class DegenerateExtentError(ValueError):
    """Zero range on exactly one in-plane axis; normalization is undefined.

    A cloud whose points all share both in-plane coordinates (e.g. a single
    point, or points differing only in depth) collapses to the center pixel
    instead.
    """


@dataclass(frozen=True)
class ViewDirection:
    """One of the six axis-aligned viewpoints, e.g. axis 'z', sign +1."""

    axis: Literal["x", "y", "z"]
    sign: Literal[1, -1]

    def __post_init__(self) -> None:
        if self.axis not in _AXIS_INDEX or self.sign not in (1, -1):
            raise ValueError(f"invalid view direction ({self.axis}, {self.sign})")

    @property
    def label(self) -> str:
        return f"{self.axis}{'+' if self.sign > 0 else '-'}"

    @classmethod
    def parse(cls, label: str) -> "ViewDirection":
        if len(label) != 2 or label[0] not in "xyz" or label[1] not in "+-":
            raise ValueError(f"bad view direction label {label!r} (want e.g. 'z+')")
        return cls(axis=label[0], sign=1 if label[1] == "+" else -1)


ALL_VIEWS = tuple(
    ViewDirection(axis=a, sign=s) for a in ("x", "y", "z") for s in (1, -1)
)


@dataclass(frozen=True)
class ViewProjection:
    """One orthographic view: raster, pixel->point grid, and point table.

    The raster is (height + 2*resolution) x (width + 2*resolution) RGB uint8;
    ``grid`` holds the claiming point index per pixel (-1 when empty) and
    every resident index appears exactly once. ``data`` maps each resident
    index to its (color, position).
    """

    direction: ViewDirection
    image: np.ndarray
    grid: np.ndarray
    data: dict[int, tuple[np.ndarray, np.ndarray]]
    width: int
    height: int
    resolution: int

    def __post_init__(self) -> None:
        rows, cols = self.height + 2 * self.resolution, self.width + 2 * self.resolution
        if self.grid.shape != (rows, cols):
            raise ValueError(f"grid shape {self.grid.shape} != {(rows, cols)}")
        if self.image.shape != (rows, cols, 3):
            raise ValueError(f"image shape {self.image.shape} != {(rows, cols, 3)}")
        resident = self.grid[self.grid >= 0]
        if len(resident) != len(np.unique(resident)):
            raise ValueError("a point index occupies more than one grid cell")
        if set(resident.tolist()) - self.data.keys():
            raise ValueError("grid references point indices missing from data")

    @property
    def raster_size(self) -> tuple[int, int]:
        """(width, height) of the raster in pixels, margins included."""
        return self.grid.shape[1], self.grid.shape[0]

    def resident_indices(self) -> np.ndarray:
        """Ascending cloud indices of all grid-resident points."""
        return np.unique(self.grid[self.grid >= 0])


def _pixel_coords(values: np.ndarray, sign: int, pixels: int,
                  resolution: int) -> np.ndarray:
    """Normalizes one in-plane coordinate to [-1, 1] and scales into the grid.

    Zero range maps everything to the axis center (callers ensure this only
    happens when both in-plane axes collapse together).
    """
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        normalized = np.zeros_like(values)
    else:
        normalized = sign * (2.0 * (values - lo) / (hi - lo) - 1.0)
    scaled = (normalized + 1.0) / 2.0 * (pixels - 1)
    return np.floor(scaled + 0.5).astype(np.int64) + resolution


def project_view(cloud: PointCloud, direction: ViewDirection, width: int = 1024,
                 height: int = 1024, resolution: int = 10) -> ViewProjection:
    """Renders one depth-resolved orthographic view of the cloud.

    Points are sorted nearest-to-viewer first along the view axis; each point
    lands on one pixel via per-axis normalization of its two in-plane
    coordinates to [-1, 1] (anisotropic: aspect ratio is not preserved), and
    only the first point to reach a pixel claims it. Depth ties go to the
    lower point index. The raster is then dilated: every occupied pixel's
    color is painted over all pixels within ``resolution`` pixels, nearest
    occupied pixel winning; the grid keeps true hits only, so back-projection
    is unaffected by the dilation.

    Raises:
        ValueError: empty cloud or non-positive raster dimensions.
        DegenerateExtentError: zero extent on exactly one in-plane axis (when
            both collapse, e.g. a single point, everything maps to the center
            pixel instead).
    """
    if len(cloud) == 0:
        raise ValueError("cannot project an empty cloud")
    if width < 1 or height < 1:
        raise ValueError(f"raster dimensions must be >= 1, got {width}x{height}")
    if resolution < 0:
        raise ValueError(f"resolution must be >= 0, got {resolution}")

    axis1, sign1, axis2, sign2 = _VIEW_BASIS[(direction.axis, direction.sign)]
    positions = cloud.positions
    in_plane_1 = positions[:, _AXIS_INDEX[axis1]]
    in_plane_2 = positions[:, _AXIS_INDEX[axis2]]
    flat_1 = in_plane_1.max() == in_plane_1.min()
    flat_2 = in_plane_2.max() == in_plane_2.min()
    if flat_1 != flat_2:
        flat_axis = axis1 if flat_1 else axis2
        raise DegenerateExtentError(f"cloud has zero extent along axis {flat_axis}")
    cols = _pixel_coords(in_plane_1, sign1, width, resolution)
    rows = _pixel_coords(in_plane_2, sign2, height, resolution)

    # Nearest first: descending coordinate for a viewer at +infinity,
    # ascending for -infinity; stable sort breaks depth ties by point index.
    depth = positions[:, _AXIS_INDEX[direction.axis]]
    order = np.argsort(-depth if direction.sign > 0 else depth, kind="stable")

    n_rows, n_cols = height + 2 * resolution, width + 2 * resolution
    flat_cells = rows[order] * n_cols + cols[order]
    cells, first_pos = np.unique(flat_cells, return_index=True)
    winners = order[first_pos]

    grid = np.full(n_rows * n_cols, -1, dtype=np.int64)
    grid[cells] = winners
    grid = grid.reshape(n_rows, n_cols)

    rgb8 = np.round(cloud.colors * 255.0).astype(np.uint8)
    image = np.full((n_rows * n_cols, 3), BACKGROUND_GRAY, dtype=np.uint8)
    image[cells] = rgb8[winners]
    image = image.reshape(n_rows, n_cols, 3)

    if resolution > 0 and len(cells):
        occupied = grid >= 0
        dist, (src_r, src_c) = distance_transform_edt(~occupied, return_indices=True)
        paint = dist <= resolution
        image[paint] = image[src_r[paint], src_c[paint]]

    data = {int(i): (cloud.colors[i], cloud.positions[i]) for i in winners}
    return ViewProjection(direction=direction, image=image, grid=grid, data=data,
                          width=width, height=height, resolution=resolution)


def back_project(projection: ViewProjection, box: BBox2D) -> PointCloud:
    """Recovers the 3D points whose grid cells fall inside a pixel box.

    Cells are visited row-major; positions and colors come back bit-identical
    to the projected cloud's. A box covering no occupied cell yields an empty
    cloud.

    Raises:
        ValueError: box extends outside the raster.
    """
    raster_w, raster_h = projection.raster_size
    if box.x_min < 0 or box.y_min < 0 or box.x_max >= raster_w or box.y_max >= raster_h:
        raise ValueError(f"box {box} out of bounds for raster {raster_w}x{raster_h}")
    window = projection.grid[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1]
    indices = window[window >= 0]
    if len(indices) == 0:
        return PointCloud(np.empty((0, 3)), np.empty((0, 3)))
    colors = np.stack([projection.data[int(i)][0] for i in indices])
    positions = np.stack([projection.data[int(i)][1] for i in indices])
    return PointCloud(positions, colors)


# ---------------------------------------------------------------------------
# Debug/exchange export
# ---------------------------------------------------------------------------

def hits_table(projection: ViewProjection) -> list[list[int]]:
    """Occupied cells as (pixel row, pixel col, point index) triplets."""
    rows, cols = np.nonzero(projection.grid >= 0)
    return [[int(r), int(c), int(projection.grid[r, c])] for r, c in zip(rows, cols)]


def save_hits_json(projection: ViewProjection, path: str | Path) -> None:
    payload = {
        "direction": projection.direction.label,
        "width": projection.width,
        "height": projection.height,
        "resolution": projection.resolution,
        "hits": hits_table(projection),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_hits_json(cloud: PointCloud, image: np.ndarray, path: str | Path) -> ViewProjection:
    """Rebuilds a ViewProjection from its source cloud, raster, and hits table."""
    payload = json.loads(Path(path).read_text())
    width, height = payload["width"], payload["height"]
    resolution = payload["resolution"]
    n_rows, n_cols = height + 2 * resolution, width + 2 * resolution
    grid = np.full((n_rows, n_cols), -1, dtype=np.int64)
    data = {}
    for r, c, idx in payload["hits"]:
        grid[r, c] = idx
        data[int(idx)] = (cloud.colors[idx], cloud.positions[idx])
    return ViewProjection(direction=ViewDirection.parse(payload["direction"]),
                          image=np.asarray(image), grid=grid, data=data,
                          width=width, height=height, resolution=resolution)
