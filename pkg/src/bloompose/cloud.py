"""Colored point clouds: PLY I/O, cropping, outlier filters, color conversion."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Coordinates are meters throughout. Clustering radii and fit bounds are
# absolute lengths, so clouds at a wildly different scale are almost
# certainly in the wrong units.
DIAGONAL_WARN_MIN_M = 0.05
DIAGONAL_WARN_MAX_M = 10.0


class PlyParseError(ValueError):
    """Raised when a PLY file cannot be parsed into a point cloud."""


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """Immutable parallel arrays of 3D positions (m) and RGB colors in [0, 1].

    Positions and colors always have matching length; positions are finite
    and color channels lie in [0, 1]. Instances are safe to share across
    threads; every operation on them returns a new cloud.
    """

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self) -> None:
        positions = _as_readonly(np.atleast_2d(self.positions).reshape(-1, 3))
        colors = _as_readonly(np.atleast_2d(self.colors).reshape(-1, 3))
        if len(positions) != len(colors):
            raise ValueError(
                f"positions ({len(positions)}) and colors ({len(colors)}) differ in length"
            )
        if len(positions) and not np.isfinite(positions).all():
            bad = int(np.argwhere(~np.isfinite(positions).all(axis=1))[0, 0])
            raise ValueError(f"non-finite position at point {bad}")
        if len(colors) and (colors.min(initial=0.0) < 0.0 or colors.max(initial=0.0) > 1.0):
            raise ValueError("color channels must lie in [0, 1]")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, index: np.ndarray) -> "PointCloud":
        """Sub-cloud at a boolean mask or integer index array, order preserved."""
        return PointCloud(self.positions[index], self.colors[index])


def empty_cloud() -> PointCloud:
    return PointCloud(np.empty((0, 3)), np.empty((0, 3)))


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    if not clouds:
        return empty_cloud()
    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
    )


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in meters; min_corner <= max_corner componentwise."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self) -> None:
        lo = _as_readonly(np.asarray(self.min_corner, dtype=np.float64).reshape(3))
        hi = _as_readonly(np.asarray(self.max_corner, dtype=np.float64).reshape(3))
        if not (lo <= hi).all():
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean inclusion mask for an (n, 3) array (bounds inclusive)."""
        pts = np.atleast_2d(points)
        return ((pts >= self.min_corner) & (pts <= self.max_corner)).all(axis=1)


@dataclass(frozen=True)
class HsvColor:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""

    hue: float
    saturation: float
    value: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.hue < 360.0):
            raise ValueError(f"hue {self.hue} outside [0, 360)")
        if not (0.0 <= self.saturation <= 1.0 and 0.0 <= self.value <= 1.0):
            raise ValueError("saturation and value must lie in [0, 1]")


# ---------------------------------------------------------------------------
# PLY I/O
# ---------------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_COLOR_ALIASES = {"red": "r", "green": "g", "blue": "b", "r": "r", "g": "g", "b": "b"}


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list[tuple[str, str]] = field(default_factory=list)  # (name, numpy code)
    has_list: bool = False


def _parse_ply_header(fh) -> tuple[str, list[_PlyElement], int]:
    """Returns (format, elements, header line count). Raises PlyParseError."""
    line = fh.readline()
    if line.strip() != b"ply":
        raise PlyParseError("line 1: not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[_PlyElement] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyParseError(f"line {lineno}: unexpected end of header")
        try:
            text = raw.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise PlyParseError(f"line {lineno}: non-ASCII header line") from exc
        if not text or text.startswith(("comment", "obj_info")):
            continue
        fields = text.split()
        if fields[0] == "format":
            if len(fields) < 2:
                raise PlyParseError(f"line {lineno}: malformed format line")
            fmt = fields[1]
            if fmt == "binary_big_endian":
                raise PlyParseError(f"line {lineno}: big-endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"line {lineno}: unknown PLY format '{fmt}'")
        elif fields[0] == "element":
            if len(fields) != 3:
                raise PlyParseError(f"line {lineno}: malformed element line '{text}'")
            try:
                count = int(fields[2])
            except ValueError as exc:
                raise PlyParseError(f"line {lineno}: bad element count '{fields[2]}'") from exc
            if count < 0:
                raise PlyParseError(f"line {lineno}: negative element count")
            elements.append(_PlyElement(fields[1], count))
        elif fields[0] == "property":
            if not elements:
                raise PlyParseError(f"line {lineno}: property before any element")
            if fields[1] == "list":
                elements[-1].has_list = True
                elements[-1].properties.append((fields[-1], "list"))
            else:
                if len(fields) != 3:
                    raise PlyParseError(f"line {lineno}: malformed property line '{text}'")
                code = _PLY_SCALARS.get(fields[1])
                if code is None:
                    raise PlyParseError(f"line {lineno}: unknown property type '{fields[1]}'")
                elements[-1].properties.append((fields[2], code))
        elif fields[0] == "end_header":
            break
        else:
            raise PlyParseError(f"line {lineno}: unrecognized header keyword '{fields[0]}'")
    if fmt is None:
        raise PlyParseError("malformed header: no format line before end_header")
    return fmt, elements, lineno


def _vertex_columns(element: _PlyElement) -> tuple[dict[str, int], dict[str, int]]:
    """Column indices for x,y,z and r,g,b; validates types."""
    coord_cols: dict[str, int] = {}
    color_cols: dict[str, int] = {}
    for i, (name, code) in enumerate(element.properties):
        lname = name.lower()
        if lname in ("x", "y", "z"):
            if code not in ("f4", "f8"):
                raise PlyParseError(f"vertex property '{name}' must be a 32- or 64-bit float")
            coord_cols[lname] = i
        elif lname in _COLOR_ALIASES:
            if code not in ("u1", "f4", "f8"):
                raise PlyParseError(f"color property '{name}' must be uchar or float")
            color_cols[_COLOR_ALIASES[lname]] = i
    missing = {"x", "y", "z"} - coord_cols.keys()
    if missing:
        raise PlyParseError(f"vertex element missing coordinate properties: {sorted(missing)}")
    if set(color_cols) != {"r", "g", "b"}:
        raise PlyParseError("vertex element missing color properties (red, green, blue)")
    return coord_cols, color_cols


def _finish_cloud(raw: np.ndarray, element: _PlyElement,
                  coord_cols: dict[str, int], color_cols: dict[str, int]) -> PointCloud:
    positions = raw[:, [coord_cols["x"], coord_cols["y"], coord_cols["z"]]]
    if len(positions) and not np.isfinite(positions).all():
        bad = int(np.argwhere(~np.isfinite(positions).all(axis=1))[0, 0])
        raise PlyParseError(f"non-finite coordinate at vertex {bad}")
    colors = raw[:, [color_cols["r"], color_cols["g"], color_cols["b"]]]
    color_types = {code for name, code in element.properties
                   if name.lower() in _COLOR_ALIASES}
    if color_types == {"u1"}:
        colors = colors / 255.0
    elif len(colors) and (colors.min() < 0.0 or colors.max() > 1.0):
        raise PlyParseError("float color channels must lie in [0, 1]")
    cloud = PointCloud(positions, colors)
    if len(cloud) >= 2:
        diag = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
        if not (DIAGONAL_WARN_MIN_M <= diag <= DIAGONAL_WARN_MAX_M):
            logger.warning(
                "cloud bounding-box diagonal %.3g m outside [%g, %g] m; "
                "coordinates are expected in meters", diag,
                DIAGONAL_WARN_MIN_M, DIAGONAL_WARN_MAX_M)
    return cloud


def load_ply(path: str | Path) -> PointCloud:
    """Loads vertices of an ASCII or binary-little-endian PLY file.

    One cloud point per vertex; 8-bit colors are scaled to [0, 1]. Faces,
    normals, and any other vertex attributes are ignored.

    Raises:
        PlyParseError: malformed header, missing x/y/z or color properties,
            unsupported encodings, or non-finite coordinates.
        FileNotFoundError: missing file.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(fh)
        vertex = next((e for e in elements if e.name == "vertex"), None)
        if vertex is None:
            raise PlyParseError("no 'vertex' element in header")
        coord_cols, color_cols = _vertex_columns(vertex)
        if vertex.has_list:
            raise PlyParseError("list properties on the vertex element are not supported")

        if fmt == "ascii":
            raw = _read_ascii_vertices(fh, elements, vertex, header_lines)
        else:
            raw = _read_binary_vertices(fh, elements, vertex)
    return _finish_cloud(raw, vertex, coord_cols, color_cols)


def _read_ascii_vertices(fh, elements: list[_PlyElement], vertex: _PlyElement,
                         header_lines: int) -> np.ndarray:
    lineno = header_lines
    for element in elements:
        if element is vertex:
            break
        for _ in range(element.count):  # skip a preceding element line by line
            fh.readline()
            lineno += 1
    n_props = len(vertex.properties)
    raw = np.empty((vertex.count, n_props), dtype=np.float64)
    for i in range(vertex.count):
        line = fh.readline()
        lineno += 1
        if not line:
            raise PlyParseError(f"line {lineno}: file ends before vertex {i}")
        tokens = line.split()
        if len(tokens) != n_props:
            raise PlyParseError(
                f"line {lineno}: expected {n_props} values for vertex {i}, got {len(tokens)}")
        try:
            raw[i] = [float(t) for t in tokens]
        except ValueError as exc:
            raise PlyParseError(f"line {lineno}: non-numeric vertex value") from exc
    # Honor declared property precision so ASCII and binary encodings of the
    # same file parse identically (e.g. "0.1" in a float32 column).
    for col, (_, code) in enumerate(vertex.properties):
        if code != "f8":
            raw[:, col] = raw[:, col].astype("<" + code).astype(np.float64)
    return raw


def _read_binary_vertices(fh, elements: list[_PlyElement], vertex: _PlyElement) -> np.ndarray:
    for element in elements:
        if element is vertex:
            break
        if element.has_list:
            raise PlyParseError(
                f"cannot skip element '{element.name}' with list properties before vertices")
        stride = sum(np.dtype("<" + code).itemsize for _, code in element.properties)
        fh.seek(stride * element.count, 1)
    dtype = np.dtype([(f"p{i}", "<" + code) for i, (_, code) in enumerate(vertex.properties)])
    offset = fh.tell()
    buf = fh.read(dtype.itemsize * vertex.count)
    if len(buf) != dtype.itemsize * vertex.count:
        raise PlyParseError(
            f"byte offset {offset + len(buf)}: file ends inside vertex data "
            f"(expected {dtype.itemsize * vertex.count} bytes)")
    records = np.frombuffer(buf, dtype=dtype)
    return np.column_stack([records[name].astype(np.float64) for name in dtype.names])


def save_ply(cloud: PointCloud, path: str | Path, binary: bool = False) -> None:
    """Writes positions as doubles and colors as 8-bit (quantized to 1/255)."""
    path = Path(path)
    rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            for pos, col in zip(cloud.positions, rgb):
                fh.write(struct.pack("<dddBBB", *pos, *col))
        else:
            for pos, col in zip(cloud.positions, rgb):
                fh.write(
                    f"{float(pos[0])!r} {float(pos[1])!r} {float(pos[2])!r} "
                    f"{col[0]} {col[1]} {col[2]}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def crop_outside(cloud: PointCloud, boxes: list[Aabb]) -> PointCloud:
    """Deletes points inside any of the given boxes (ground/clutter removal).

    Survivor order matches the input. An empty box list is the identity.
    """
    if not boxes or len(cloud) == 0:
        return cloud
    inside = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        inside |= box.contains(cloud.positions)
    return cloud.select(~inside)


def statistical_outlier_removal(cloud: PointCloud, k: int = 20,
                                std_ratio: float = 2.0) -> PointCloud:
    """Drops points whose mean k-nearest-neighbor distance is anomalously large.

    A point survives when its mean distance to its k nearest neighbors is at
    most (global mean + std_ratio * global std) of that statistic.

    Raises:
        ValueError: k < 1, std_ratio <= 0, or cloud size <= k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if std_ratio <= 0:
        raise ValueError(f"std_ratio must be > 0, got {std_ratio}")
    if len(cloud) <= k:
        raise ValueError(f"cloud of {len(cloud)} points is too small for k={k}")
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=k + 1)  # first neighbor is the point itself
    mean_dist = dists[:, 1:].mean(axis=1)
    threshold = mean_dist.mean() + std_ratio * mean_dist.std()
    return cloud.select(mean_dist <= threshold)


def radius_outlier_removal(cloud: PointCloud, radius: float = 0.01,
                           min_neighbors: int = 5) -> PointCloud:
    """Keeps points with at least min_neighbors other points within radius."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if min_neighbors < 1:
        raise ValueError(f"min_neighbors must be >= 1, got {min_neighbors}")
    if len(cloud) == 0:
        return cloud
    tree = cKDTree(cloud.positions)
    counts = tree.query_ball_point(cloud.positions, r=radius, return_length=True)
    return cloud.select(counts - 1 >= min_neighbors)  # discount the point itself


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of positions; raises ValueError on an empty cloud."""
    if len(cloud) == 0:
        raise ValueError("centroid of an empty cloud is undefined")
    return cloud.positions.mean(axis=0)


# ---------------------------------------------------------------------------
# Color space
# ---------------------------------------------------------------------------

def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hexcone RGB->HSV for an (..., 3) array in [0, 1].

    Returns hue in degrees [0, 360), saturation and value in [0, 1]. The hue
    of achromatic colors is 0.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(v > 0, delta / v, 0.0)
        hue = np.where(
            delta > 0,
            np.select(
                [v == r, v == g],
                [(g - b) / delta, (b - r) / delta + 2.0],
                default=(r - g) / delta + 4.0,
            ),
            0.0,
        )
    hue = (hue * 60.0) % 360.0
    hue = np.where(hue >= 360.0, 0.0, hue)  # -epsilon % 360 can round up to 360
    return np.stack([hue, np.where(delta > 0, s, 0.0), v], axis=-1)


def rgb_to_hsv(color) -> HsvColor:
    """Converts one RGB triple in [0, 1] to HSV (hue 0 for achromatic colors)."""
    rgb = np.asarray(color, dtype=np.float64).reshape(3)
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError(f"RGB channels must lie in [0, 1], got {rgb}")
    h, s, v = rgb_to_hsv_array(rgb)
    return HsvColor(float(h), float(s), float(v))


def hsv_to_rgb_array(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion; hue in degrees, any real value accepted."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h = (hsv[..., 0] % 360.0) / 60.0
    s, v = hsv[..., 1], hsv[..., 2]
    i = np.floor(h)
    f = h - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def hsv_to_rgb(color: HsvColor) -> np.ndarray:
    return hsv_to_rgb_array(np.array([color.hue, color.saturation, color.value]))
