"""Detection model registry for the adapter.

A model is a callable mapping an (H, W, 3) uint8 RGB array to a list of
box dicts {x_min, y_min, x_max, y_max, score}. Three kinds are built in:

* ``stub`` - returns the fixed boxes it was configured with (testing).
* ``hsv`` - classical white-blob detector (HSV threshold + connected
  components); a weights-free stand-in for a fine-tuned network.
* ``python:<module>:<callable>`` - imports a user-supplied factory, the
  hook for real pretrained models whose weights ship separately.
"""

from __future__ import annotations

import importlib
from typing import Callable

import numpy as np
from scipy import ndimage

Model = Callable[[np.ndarray], list[dict]]


class ModelLoadError(RuntimeError):
    """The configured model identifier cannot be resolved."""


def _stub_model(boxes: list[dict]) -> Model:
    fixed = [dict(b) for b in boxes]

    def run(image: np.ndarray) -> list[dict]:
        return [dict(b) for b in fixed]

    return run


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float64) / 255.0
    value = rgb.max(axis=-1)
    delta = value - rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        saturation = np.where(value > 0, delta / value, 0.0)
    return saturation, value


def _hsv_model(sat_max: float = 0.25, val_min: float = 0.6,
               min_area: int = 30) -> Model:
    def run(image: np.ndarray) -> list[dict]:
        saturation, value = _rgb_to_hsv(image)
        mask = (saturation <= sat_max) & (value >= val_min)
        labeled, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        if count == 0:
            return []
        areas = np.bincount(labeled.ravel())
        boxes = []
        for lab, sl in enumerate(ndimage.find_objects(labeled), start=1):
            if areas[lab] < min_area:
                continue
            window = mask[sl]
            boxes.append({
                "x_min": int(sl[1].start), "x_max": int(sl[1].stop - 1),
                "y_min": int(sl[0].start), "y_max": int(sl[0].stop - 1),
                "score": float(window.mean()),
            })
        boxes.sort(key=lambda b: (b["y_min"], b["x_min"], b["y_max"], b["x_max"]))
        return boxes

    return run


def load_model(identifier: str, stub_boxes: list[dict] | None = None) -> Model:
    """Resolves a model identifier; raises ModelLoadError at startup on failure."""
    if identifier == "stub":
        return _stub_model(stub_boxes or [])
    if identifier == "hsv":
        return _hsv_model()
    if identifier.startswith("python:"):
        try:
            _, module_name, attr = identifier.split(":", 2)
            module = importlib.import_module(module_name)
            factory = getattr(module, attr)
        except (ValueError, ImportError, AttributeError) as exc:
            raise ModelLoadError(f"cannot load model {identifier!r}: {exc}") from exc
        model = factory()
        if not callable(model):
            raise ModelLoadError(f"{identifier!r} did not produce a callable model")
        return model
    raise ModelLoadError(
        f"unknown model {identifier!r} (expected stub, hsv, or python:<module>:<callable>)")
