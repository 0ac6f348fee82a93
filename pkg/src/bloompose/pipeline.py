"""End-to-end orchestration: views, detection, extraction, fits, artifacts.

The batch entry point is run_pipeline, which mirrors the method's outer loop:
project the cloud into six orthographic views, detect flowers in each view,
back-project the boxes, pool the recovered points, filter and cluster them
into per-flower clouds, then segment and fit each flower. All artifacts are
deterministic for a fixed input and configuration.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import PointCloud, centroid, concat_clouds, crop_outside, load_ply, \
    radius_outlier_removal, save_ply, statistical_outlier_removal
from .clustering import ClusterLabeling, cluster_clouds, dbscan
from .config import PipelineConfig
from .detection import BBox2D, ColorThresholdDetector, Detector, ExternalDetector, save_png
from .evaluation import GroundTruthLabel, PlantRecord, build_report, check_gates, \
    classify_extras, load_labels, match_detections, render_table
from .fitting import DegenerateGeometryError, PoseEstimate, SolverDivergenceError, \
    fit_paraboloid, fit_plane, fit_superellipsoid, superellipsoid_pose
from .projection import ALL_VIEWS, ViewProjection, back_project, project_view
from .segmentation import FlowerSegment, UnfittableFlowerError, segment_flower
from .synth import PETAL, PISTIL, PointMembership

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Failure attributed to one pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def detector_from_config(config: PipelineConfig) -> Detector:
    det = config.detector
    if det.kind == "builtin":
        return ColorThresholdDetector(petal_filter=config.petal_hsv.as_range(),
                                      min_area=det.min_area, merge_gap=det.merge_gap)
    if det.exchange_dir is None:
        raise StageError("detect", "external detector requires detector.exchange_dir")
    return ExternalDetector(exchange_dir=Path(det.exchange_dir),
                            timeout=det.timeout_s, poll_interval=det.poll_interval_s)


@dataclass
class ExtractionResult:
    views: list[ViewProjection]
    boxes: list[list[BBox2D]]  # per view, after score thresholding
    union: PointCloud
    labeling: Optional[ClusterLabeling]
    flowers: list[PointCloud]


def run_extraction(cloud: PointCloud, detector: Detector, config: PipelineConfig,
                   threads: int = 1) -> ExtractionResult:
    """Projects, detects, back-projects, pools, filters, and clusters.

    The six views are independent and may be projected in parallel; detection
    runs sequentially in view order because external detectors allow one
    request in flight per exchange directory. Small pooled clouds skip the
    statistical filter (it needs more points than its neighbor count).
    """
    if len(cloud) == 0:
        raise ValueError("cannot extract flowers from an empty cloud")
    raster = config.raster
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            views = list(pool.map(
                lambda d: project_view(cloud, d, raster.width, raster.height,
                                       raster.resolution), ALL_VIEWS))
    else:
        views = [project_view(cloud, d, raster.width, raster.height, raster.resolution)
                 for d in ALL_VIEWS]

    kept_boxes: list[list[BBox2D]] = []
    parts: list[PointCloud] = []
    for view in views:
        boxes = [b for b in detector.detect(view.image)
                 if b.score >= config.detector.score_threshold]
        kept_boxes.append(boxes)
        parts.extend(back_project(view, box) for box in boxes)

    union = concat_clouds(parts)
    if len(union) == 0:
        return ExtractionResult(views=views, boxes=kept_boxes, union=union,
                                labeling=None, flowers=[])
    filtered = union
    if len(filtered) > config.outliers.statistical_k:
        filtered = statistical_outlier_removal(filtered, config.outliers.statistical_k,
                                               config.outliers.statistical_std_ratio)
    filtered = radius_outlier_removal(filtered, config.outliers.radius,
                                      config.outliers.radius_min_neighbors)
    labeling = dbscan(filtered, config.dbscan.eps, config.dbscan.min_points)
    return ExtractionResult(views=views, boxes=kept_boxes, union=filtered,
                            labeling=labeling,
                            flowers=cluster_clouds(filtered, labeling))


def extract_flowers(cloud: PointCloud, detector: Detector,
                    config: PipelineConfig) -> list[PointCloud]:
    """One cloud per flower candidate found across all six views."""
    return run_extraction(cloud, detector, config, threads=config.threads).flowers


@dataclass
class FlowerOutcome:
    index: int
    cloud: PointCloud
    flower_centroid: np.ndarray
    status: str  # ok | unfittable
    segment: Optional[FlowerSegment] = None
    estimates: dict[str, PoseEstimate] = field(default_factory=dict)
    fit_errors: dict[str, str] = field(default_factory=dict)
    reason: Optional[str] = None

    @property
    def name(self) -> str:
        return f"flower_{self.index:03d}"


def analyze_flower(index: int, flower: PointCloud, config: PipelineConfig) -> FlowerOutcome:
    """Segments one candidate and runs all three fits on its centered petals."""
    flower_centroid = centroid(flower)
    try:
        segment = segment_flower(flower, config.segmentation_params())
    except UnfittableFlowerError as exc:
        return FlowerOutcome(index=index, cloud=flower, flower_centroid=flower_centroid,
                             status="unfittable", reason=str(exc))
    centered = PointCloud(segment.petals.positions - segment.petal_centroid,
                          segment.petals.colors)
    outcome = FlowerOutcome(index=index, cloud=flower, flower_centroid=flower_centroid,
                            status="ok", segment=segment)
    fit = config.fit
    try:
        se_fit = fit_superellipsoid(centered, tol=fit.tol, max_iter=fit.max_iter,
                                    axis_bound=fit.axis_bound,
                                    exponent_bounds=(fit.exponent_min, fit.exponent_max))
        outcome.estimates["superellipsoid"] = superellipsoid_pose(
            se_fit, segment.flower_centroid, segment.pistil_centroid)
    except (ValueError, SolverDivergenceError) as exc:
        outcome.fit_errors["superellipsoid"] = str(exc)
    try:
        outcome.estimates["paraboloid"] = fit_paraboloid(
            centered, segment.pistil_centroid, segment.flower_centroid,
            tol=fit.tol, max_iter=fit.max_iter, init_scale=fit.paraboloid_init)
    except (ValueError, SolverDivergenceError) as exc:
        outcome.fit_errors["paraboloid"] = str(exc)
    try:
        outcome.estimates["plane"] = fit_plane(
            centered, segment.flower_centroid, segment.pistil_centroid)
    except (ValueError, DegenerateGeometryError) as exc:
        outcome.fit_errors["plane"] = str(exc)
    return outcome


def analyze_flowers(flowers: list[PointCloud], config: PipelineConfig,
                    threads: int = 1) -> list[FlowerOutcome]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda pair: analyze_flower(pair[0], pair[1], config),
                enumerate(flowers)))
    return [analyze_flower(i, f, config) for i, f in enumerate(flowers)]


# ---------------------------------------------------------------------------
# Artifact records
# ---------------------------------------------------------------------------

def _angles_record(angles) -> dict:
    return {"phi": float(angles.phi), "theta": float(angles.theta),
            "psi": float(angles.psi)}


def estimate_record(estimate: PoseEstimate) -> dict:
    record = {
        "direction": [float(v) for v in estimate.direction],
        "method": estimate.method,
        "flags": list(estimate.flags),
    }
    diag = estimate.diagnostics
    if estimate.method == "superellipsoid":
        record["params"] = {"a": float(diag.a), "b": float(diag.b), "c": float(diag.c),
                            "eps1": float(diag.eps1), "eps2": float(diag.eps2),
                            "angles": _angles_record(diag.angles)}
        record["residual_rms"] = float(diag.residual_rms)
    elif estimate.method == "paraboloid":
        record["params"] = {"a": float(diag.a), "b": float(diag.b),
                            "angles": _angles_record(diag.angles)}
        record["residual_rms"] = float(diag.residual_rms)
    else:
        record["params"] = {"eigenvalues": [float(v) for v in diag.eigenvalues]}
    return record


def pose_records(outcomes: list[FlowerOutcome]) -> dict:
    flowers = []
    for outcome in outcomes:
        record = {
            "id": outcome.name,
            "points": len(outcome.cloud),
            "centroid": [float(v) for v in outcome.flower_centroid],
            "status": outcome.status,
            "estimates": {m: estimate_record(e) for m, e in outcome.estimates.items()},
        }
        if outcome.reason:
            record["reason"] = outcome.reason
        if outcome.fit_errors:
            record["fit_errors"] = dict(sorted(outcome.fit_errors.items()))
        if outcome.segment is not None:
            record["petal_points"] = len(outcome.segment.petals)
            record["pistil_points"] = len(outcome.segment.pistil)
        flowers.append(record)
    return {"flowers": flowers}


def detection_records(outcomes: list[FlowerOutcome]) -> dict:
    # segmentation status lives in poses.json; detections are pre-segmentation
    return {
        "count": len(outcomes),
        "detections": [
            {"id": o.name, "points": len(o.cloud),
             "centroid": [float(v) for v in o.flower_centroid]}
            for o in outcomes
        ],
    }


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def draw_boxes(image: np.ndarray, boxes: list[BBox2D],
               color: tuple[int, int, int] = (255, 0, 0), thickness: int = 2) -> np.ndarray:
    """Copy of the raster with box outlines painted on it."""
    out = np.array(image, copy=True)
    h, w = out.shape[:2]
    for box in boxes:
        x0, x1 = max(box.x_min, 0), min(box.x_max, w - 1)
        y0, y1 = max(box.y_min, 0), min(box.y_max, h - 1)
        for t in range(thickness):
            out[max(y0 - t, 0), x0:x1 + 1] = color
            out[min(y1 + t, h - 1), x0:x1 + 1] = color
            out[y0:y1 + 1, max(x0 - t, 0)] = color
            out[y0:y1 + 1, min(x1 + t, w - 1)] = color
    return out


def label_overlap_flags(outcomes: list[FlowerOutcome], source: PointCloud,
                        membership: Optional[PointMembership]) -> list[bool]:
    """Whether each detection shares points with any labeled flower.

    Detection clouds carry positions bit-identical to the source cloud's, so
    overlap is an exact position lookup against the membership tags. Without
    membership every detection counts as overlapping (unmatched detections
    then all report as extras, never false positives).
    """
    if membership is None or len(membership) != len(source):
        if membership is not None:
            logger.warning("membership length %d does not match cloud %d; ignoring",
                           len(membership), len(source))
        return [True] * len(outcomes)
    on_flower = {
        source.positions[i].tobytes()
        for i in range(len(source))
        if membership.flower_ids[i] >= 0 and membership.roles[i] in (PETAL, PISTIL)
    }
    flags = []
    for outcome in outcomes:
        flags.append(any(p.tobytes() in on_flower for p in outcome.cloud.positions))
    return flags


def evaluate_records(centroids: np.ndarray,
                     directions: list[dict[str, np.ndarray]],
                     labels: list[GroundTruthLabel], max_dist: float, plant_id: str,
                     overlap_flags: Optional[list[bool]] = None) -> dict:
    """Builds the evaluation report for one plant from plain detection records.

    ``directions`` holds, per detection, the estimated unit direction by
    method (empty for unfittable detections).
    """
    from .fitting import angular_error

    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    match = match_detections(centroids, labels, max_dist=max_dist)
    if overlap_flags is None:
        overlap_flags = [True] * len(centroids)
    extras, false_positives = classify_extras(match, overlap_flags)
    label_by_id = {lab.id: lab for lab in labels}
    errors: dict[str, list[tuple[str, float]]] = {}
    for det_index, label_id in match.matched:
        truth = label_by_id[label_id]
        for method, direction in directions[det_index].items():
            errors.setdefault(method, []).append(
                (label_id, angular_error(direction, truth.direction)))
    for method in errors:
        errors[method].sort()
    record = PlantRecord(plant_id=plant_id, ground_truth=len(labels),
                         found=len(match.matched), extra=len(extras),
                         false_positives=len(false_positives), errors=errors)
    return build_report([record])


def evaluate_outcomes(outcomes: list[FlowerOutcome], labels: list[GroundTruthLabel],
                      max_dist: float, plant_id: str,
                      overlap_flags: Optional[list[bool]] = None) -> dict:
    """Builds the evaluation report for one plant's outcomes."""
    centroids = np.array([o.flower_centroid for o in outcomes]).reshape(-1, 3)
    directions = [{m: e.direction for m, e in o.estimates.items()} for o in outcomes]
    return evaluate_records(centroids, directions, labels, max_dist, plant_id,
                            overlap_flags)


# ---------------------------------------------------------------------------
# Batch entry point
# ---------------------------------------------------------------------------

def run_pipeline(input_path: str | Path, config: PipelineConfig, out_dir: str | Path,
                 ground_truth_path: Optional[str | Path] = None,
                 membership: Optional[PointMembership] = None,
                 detector: Optional[Detector] = None,
                 threads: Optional[int] = None) -> int:
    """Runs the full pipeline on one PLY scan and writes all artifacts.

    Emits per-view rasters and box overlays, per-flower candidate/petal/pistil
    clouds with a segment record, poses.json, detections.json, and (when
    ground truth is supplied) report.json plus an aligned-text report.txt.
    Returns 0, or 1 when a configured evaluation gate fails.

    Raises:
        StageError: any stage failure, tagged with the stage name.
    """
    out_dir = Path(out_dir)
    threads = config.threads if threads is None else threads

    try:
        cloud = load_ply(input_path)
        cloud = crop_outside(cloud, config.crop_aabbs())
        if len(cloud) == 0:
            raise ValueError("no points remain after crop")
    except Exception as exc:
        raise StageError("load", str(exc)) from exc

    try:
        if detector is None:
            detector = detector_from_config(config)
        extraction = run_extraction(cloud, detector, config, threads=threads)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("extract", str(exc)) from exc

    try:
        outcomes = analyze_flowers(extraction.flowers, config, threads=threads)
    except Exception as exc:
        raise StageError("fit", str(exc)) from exc

    try:
        views_dir = out_dir / "views"
        views_dir.mkdir(parents=True, exist_ok=True)
        for view, boxes in zip(extraction.views, extraction.boxes):
            save_png(view.image, views_dir / f"view_{view.direction.label}.png")
            save_png(draw_boxes(view.image, boxes),
                     views_dir / f"view_{view.direction.label}.overlay.png")
        for outcome in outcomes:
            flower_dir = out_dir / "flowers" / outcome.name
            flower_dir.mkdir(parents=True, exist_ok=True)
            save_ply(outcome.cloud, flower_dir / "candidate.ply", binary=True)
            segment_record = {"id": outcome.name, "status": outcome.status,
                              "points": len(outcome.cloud)}
            if outcome.reason:
                segment_record["reason"] = outcome.reason
            if outcome.segment is not None:
                save_ply(outcome.segment.petals, flower_dir / "petals.ply", binary=True)
                save_ply(outcome.segment.pistil, flower_dir / "pistil.ply", binary=True)
                segment_record.update({
                    "petal_points": len(outcome.segment.petals),
                    "pistil_points": len(outcome.segment.pistil),
                    "petal_centroid": [float(v) for v in outcome.segment.petal_centroid],
                    "pistil_centroid":
                        None if outcome.segment.pistil_centroid is None
                        else [float(v) for v in outcome.segment.pistil_centroid],
                    "flower_centroid": [float(v) for v in outcome.segment.flower_centroid],
                })
            write_json(flower_dir / "segment.json", segment_record)
        write_json(out_dir / "poses.json", pose_records(outcomes))
        write_json(out_dir / "detections.json", detection_records(outcomes))
    except Exception as exc:
        raise StageError("artifacts", str(exc)) from exc

    if ground_truth_path is None:
        return 0

    try:
        labels = load_labels(ground_truth_path)
        overlap = label_overlap_flags(outcomes, cloud, membership)
        report = evaluate_outcomes(outcomes, labels, config.matching.max_dist,
                                   plant_id=Path(input_path).stem,
                                   overlap_flags=overlap)
        write_json(out_dir / "report.json", report)
        (out_dir / "report.txt").write_text(render_table(report))
        violations = check_gates(report, config.gates.min_detection_rate_pct,
                                 config.gates.max_mean_plane_error_deg)
        for violation in violations:
            logger.error("gate violated: %s", violation)
        return 1 if violations else 0
    except Exception as exc:
        raise StageError("evaluate", str(exc)) from exc
