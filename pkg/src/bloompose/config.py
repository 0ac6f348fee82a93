"""Pipeline configuration: one JSON file, fully defaulted, strictly parsed.

Every tunable constant of the pipeline lives here so ablations are
scriptable; unknown keys are rejected rather than silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cloud import Aabb
from .segmentation import HsvRange, SegmentationParams


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass(frozen=True)
class RasterConfig:
    width: int = 1024
    height: int = 1024
    resolution: int = 10  # splat radius / margin, pixels

    def __post_init__(self) -> None:
        if not (1 <= self.width <= 7000 and 1 <= self.height <= 7000):
            raise ConfigError("raster width/height must be in [1, 7000]")
        if self.resolution < 0:
            raise ConfigError("raster resolution must be >= 0")


@dataclass(frozen=True)
class DetectorSettings:
    kind: str = "builtin"  # builtin | external
    min_area: int = 30
    merge_gap: int = 5
    score_threshold: float = 0.5
    exchange_dir: Optional[str] = None
    timeout_s: float = 30.0
    poll_interval_s: float = 0.05

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "external"):
            raise ConfigError(f"detector kind must be builtin or external, got {self.kind!r}")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ConfigError("score_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class HsvWindow:
    hue_min: float = 0.0
    hue_max: float = 360.0
    sat_min: float = 0.0
    sat_max: float = 1.0
    val_min: float = 0.0
    val_max: float = 1.0

    def as_range(self) -> HsvRange:
        return HsvRange(**dataclasses.asdict(self))


@dataclass(frozen=True)
class DbscanSettings:
    eps: float = 0.01
    min_points: int = 20


@dataclass(frozen=True)
class OutlierSettings:
    statistical_k: int = 20
    statistical_std_ratio: float = 2.0
    radius: float = 0.01
    radius_min_neighbors: int = 5


@dataclass(frozen=True)
class FitSettings:
    tol: float = 1e-10
    max_iter: int = 200
    axis_bound: float = 0.1
    exponent_min: float = 0.9
    exponent_max: float = 1.1
    paraboloid_init: float = 0.05


@dataclass(frozen=True)
class MatchingSettings:
    max_dist: float = 0.05


@dataclass(frozen=True)
class CaptureSettings:
    center_fraction: float = 0.5


@dataclass(frozen=True)
class GateSettings:
    min_detection_rate_pct: Optional[float] = None
    max_mean_plane_error_deg: Optional[float] = None


@dataclass(frozen=True)
class SynthSettings:
    n_flowers: int = 8
    bed_min: tuple[float, float, float] = (-0.3, -0.3, 0.0)
    bed_max: tuple[float, float, float] = (0.3, 0.3, 0.35)
    foliage_density: float = 100_000.0
    petal_radius: float = 0.025
    pistil_radius: float = 0.004
    point_density: float = 200_000.0
    noise_sigma: float = 0.0005
    curvature_min: float = -0.6
    curvature_max: float = 0.9

    def bed(self) -> Aabb:
        return Aabb(self.bed_min, self.bed_max)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    raster: RasterConfig = field(default_factory=RasterConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    petal_hsv: HsvWindow = field(default_factory=lambda: HsvWindow(sat_max=0.25, val_min=0.6))
    pistil_hsv: HsvWindow = field(default_factory=lambda: HsvWindow(
        hue_min=40.0, hue_max=70.0, sat_min=0.3, val_min=0.4))
    dbscan: DbscanSettings = field(default_factory=DbscanSettings)
    pistil_dbscan: DbscanSettings = field(default_factory=lambda: DbscanSettings(min_points=10))
    outliers: OutlierSettings = field(default_factory=OutlierSettings)
    min_petal_points: int = 30
    fit: FitSettings = field(default_factory=FitSettings)
    matching: MatchingSettings = field(default_factory=MatchingSettings)
    capture: CaptureSettings = field(default_factory=CaptureSettings)
    gates: GateSettings = field(default_factory=GateSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    crop_boxes: tuple = ()  # Aabb list; default deletes nothing

    def segmentation_params(self) -> SegmentationParams:
        return SegmentationParams(
            petal_range=self.petal_hsv.as_range(),
            pistil_range=self.pistil_hsv.as_range(),
            pistil_eps=self.pistil_dbscan.eps,
            pistil_min_points=self.pistil_dbscan.min_points,
            min_petal_points=self.min_petal_points,
        )

    def crop_aabbs(self) -> list[Aabb]:
        return list(self.crop_boxes)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key '{where}{sorted(unknown)[0]}'")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if type_name in _NESTED:
            kwargs[name] = _build(_NESTED[type_name], value, sub)
        elif name == "crop_boxes":
            kwargs[name] = tuple(_parse_box(b, f"{sub}[{i}]") for i, b in enumerate(value))
        elif name in ("bed_min", "bed_max"):
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _parse_box(data: dict, path: str) -> Aabb:
    if not isinstance(data, dict) or set(data) != {"min", "max"}:
        raise ConfigError(f"{path}: crop box needs exactly keys 'min' and 'max'")
    return Aabb(data["min"], data["max"])


_NESTED = {
    "RasterConfig": RasterConfig,
    "DetectorSettings": DetectorSettings,
    "HsvWindow": HsvWindow,
    "DbscanSettings": DbscanSettings,
    "OutlierSettings": OutlierSettings,
    "FitSettings": FitSettings,
    "MatchingSettings": MatchingSettings,
    "CaptureSettings": CaptureSettings,
    "GateSettings": GateSettings,
    "SynthSettings": SynthSettings,
}


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path: str | Path) -> PipelineConfig:
    """Parses a JSON config file; unknown keys raise ConfigError."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(config: PipelineConfig) -> dict:
    out = dataclasses.asdict(config)
    out["crop_boxes"] = [
        {"min": [float(v) for v in box.min_corner],
         "max": [float(v) for v in box.max_corner]}
        for box in config.crop_boxes
    ]
    for key in ("bed_min", "bed_max"):
        out["synth"][key] = [float(v) for v in out["synth"][key]]
    return out


def save_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")
