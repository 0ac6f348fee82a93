"""2D flower detection on projected rasters.

Two detectors share one abstraction: a built-in color-threshold detector and
a file-exchange bridge to external detector processes. The exchange protocol
is a directory convention: the client writes ``<id>.png`` plus
``<id>.req.json`` and polls for ``<id>.resp.json``; records are moved into
place atomically so neither side sees partial files.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import jsonschema
import numpy as np
from PIL import Image
from scipy import ndimage

from .segmentation import HsvRange, WHITE_PETALS
from .cloud import rgb_to_hsv_array

logger = logging.getLogger(__name__)


class ExchangeTimeoutError(RuntimeError):
    """No response record appeared within the allotted time."""


class ExchangeProtocolError(RuntimeError):
    """A response record violated the exchange schema."""


REQUEST_SCHEMA = {
    "type": "object",
    "properties": {
        "image": {"type": "string"},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
    },
    "required": ["image", "width", "height"],
    "additionalProperties": False,
}

RESPONSE_SCHEMA = {
    "type": "object",
    "properties": {
        "boxes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "x_min": {"type": "number"},
                    "y_min": {"type": "number"},
                    "x_max": {"type": "number"},
                    "y_max": {"type": "number"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "required": ["x_min", "y_min", "x_max", "y_max", "score"],
                "additionalProperties": False,
            },
        },
        "error": {"type": "string"},
    },
    "required": ["boxes"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class BBox2D:
    """Inclusive pixel rectangle; x is the column, y the row (y grows downward)."""

    x_min: int
    x_max: int
    y_min: int
    y_max: int
    score: float = 1.0

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def clipped(self, width: int, height: int) -> "BBox2D":
        """Box intersected with a (width x height) raster."""
        return BBox2D(
            x_min=max(0, min(self.x_min, width - 1)),
            x_max=max(0, min(self.x_max, width - 1)),
            y_min=max(0, min(self.y_min, height - 1)),
            y_max=max(0, min(self.y_max, height - 1)),
            score=self.score,
        )


class Detector(Protocol):
    """Maps an RGB raster to a list of 2D boxes, deterministically."""

    def detect(self, image: np.ndarray) -> list[BBox2D]: ...


def _image_as_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def _box_gap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> int:
    """Pixels strictly separating two inclusive boxes (0 when they touch/overlap)."""
    ax0, ax1, ay0, ay1 = a
    bx0, bx1, by0, by1 = b
    gap_x = max(0, max(ax0, bx0) - min(ax1, bx1) - 1)
    gap_y = max(0, max(ay0, by0) - min(ay1, by1) - 1)
    return max(gap_x, gap_y)


def color_threshold_detect(image: np.ndarray, petal_filter: HsvRange = WHITE_PETALS,
                           min_area: int = 30, merge_gap: int = 5) -> list[BBox2D]:
    """Finds boxes around connected blobs of filter-passing pixels.

    Pixels passing the HSV filter are grouped into 8-connected components;
    components smaller than min_area pixels are discarded; boxes separated by
    at most merge_gap pixels are merged (repeatedly, until stable). Each box
    scores the fraction of its pixels that pass the filter.
    """
    rgb = _image_as_float(image)
    mask = petal_filter.contains(rgb_to_hsv_array(rgb))
    labeled, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return []
    areas = np.bincount(labeled.ravel())
    slices = ndimage.find_objects(labeled)
    boxes = [
        (sl[1].start, sl[1].stop - 1, sl[0].start, sl[0].stop - 1)  # x0, x1, y0, y1
        for lab, sl in enumerate(slices, start=1)
        if areas[lab] >= min_area
    ]

    merged = True
    while merged:
        merged = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if _box_gap(boxes[i], boxes[j]) <= merge_gap:
                    a, b = boxes[i], boxes[j]
                    boxes[i] = (min(a[0], b[0]), max(a[1], b[1]),
                                min(a[2], b[2]), max(a[3], b[3]))
                    del boxes[j]
                    merged = True
                    break
            if merged:
                break

    results = []
    for x0, x1, y0, y1 in sorted(boxes, key=lambda b: (b[2], b[0], b[3], b[1])):
        score = float(mask[y0:y1 + 1, x0:x1 + 1].mean())
        results.append(BBox2D(x_min=x0, x_max=x1, y_min=y0, y_max=y1, score=score))
    return results


@dataclass(frozen=True)
class ColorThresholdDetector:
    petal_filter: HsvRange = WHITE_PETALS
    min_area: int = 30
    merge_gap: int = 5

    def detect(self, image: np.ndarray) -> list[BBox2D]:
        return color_threshold_detect(image, self.petal_filter,
                                      self.min_area, self.merge_gap)


# ---------------------------------------------------------------------------
# File-exchange protocol
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path: str | Path) -> None:
    """Writes an (H, W, 3) raster as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if not np.issubdtype(arr.dtype, np.integer):
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Reads a PNG as an (H, W, 3) uint8 array."""
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# Ids never recycle within a process (a reused id could pair a stale response
# with a new request); the pid prefix keeps concurrent clients apart.
_REQUEST_COUNTER = itertools.count(1)


def _next_request_id() -> str:
    return f"{os.getpid():x}-{next(_REQUEST_COUNTER):06d}"


def external_detect(image: np.ndarray, exchange_dir: str | Path,
                    timeout: float = 30.0, poll_interval: float = 0.05) -> list[BBox2D]:
    """Runs one detection through the file-exchange protocol.

    Writes the raster and a request record into exchange_dir, polls for the
    matching response record, and returns its boxes clipped to the raster.
    Out-of-bounds boxes are clipped with a warning; a response carrying an
    ``error`` field is logged and its (typically empty) box list returned, so
    a struggling adapter degrades to "no detections" rather than aborting the
    pipeline. One request is in flight per exchange directory at a time.

    Raises:
        ExchangeTimeoutError: no response within ``timeout`` seconds.
        ExchangeProtocolError: response fails schema validation.
    """
    exchange_dir = Path(exchange_dir)
    exchange_dir.mkdir(parents=True, exist_ok=True)
    height, width = np.asarray(image).shape[:2]
    request_id = _next_request_id()

    png_path = exchange_dir / f"{request_id}.png"
    tmp_png = exchange_dir / f"{request_id}.png.tmp"
    save_png(image, tmp_png)
    os.replace(tmp_png, png_path)
    request = {"image": png_path.name, "width": int(width), "height": int(height)}
    jsonschema.validate(request, REQUEST_SCHEMA)
    _atomic_write(exchange_dir / f"{request_id}.req.json",
                  json.dumps(request, sort_keys=True).encode())

    resp_path = exchange_dir / f"{request_id}.resp.json"
    deadline = time.monotonic() + timeout
    while not resp_path.exists():
        if time.monotonic() > deadline:
            raise ExchangeTimeoutError(
                f"no response for request {request_id} within {timeout} s")
        time.sleep(poll_interval)

    try:
        response = json.loads(resp_path.read_text())
        jsonschema.validate(response, RESPONSE_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise ExchangeProtocolError(f"malformed response {resp_path.name}: {exc}") from exc
    finally:
        for p in (png_path, exchange_dir / f"{request_id}.req.json", resp_path):
            p.unlink(missing_ok=True)

    if "error" in response:
        logger.warning("adapter reported an error for request %s: %s",
                       request_id, response["error"])
    boxes = []
    for record in response["boxes"]:
        box = BBox2D(x_min=int(record["x_min"]), x_max=int(record["x_max"]),
                     y_min=int(record["y_min"]), y_max=int(record["y_max"]),
                     score=float(record["score"]))
        clipped = box.clipped(width, height)
        if clipped != box:
            logger.warning("request %s: box %s exceeds the %dx%d raster; clipped",
                           request_id, box, width, height)
        boxes.append(clipped)
    return boxes


@dataclass(frozen=True)
class ExternalDetector:
    exchange_dir: Path
    timeout: float = 30.0
    poll_interval: float = 0.05

    def detect(self, image: np.ndarray) -> list[BBox2D]:
        return external_detect(image, self.exchange_dir, self.timeout, self.poll_interval)
