"""Command-line entry point; every pipeline stage is runnable on files.

Subcommands map one-to-one onto the library stages (synth, project, detect,
extract, segment, fit, evaluate, select-frames) plus ``run`` for the whole
pipeline, so each stage is independently testable and stage outputs chain
into byte-identical final artifacts. Flags fall back to environment
variables prefixed ``BLOOMPOSE_`` (e.g. BLOOMPOSE_CONFIG, BLOOMPOSE_THREADS).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .capture import FrameScore, select_frames, sharpness_score
from .cloud import PointCloud, centroid, concat_clouds, load_ply, \
    radius_outlier_removal, save_ply, statistical_outlier_removal
from .clustering import cluster_clouds, dbscan
from .config import PipelineConfig, load_config, save_config
from .detection import BBox2D, load_png, save_png
from .evaluation import load_labels
from .fitting import DegenerateGeometryError, SolverDivergenceError, fit_paraboloid, \
    fit_plane, fit_superellipsoid, superellipsoid_pose
from .pipeline import StageError, detector_from_config, estimate_record, \
    evaluate_records, label_overlap_flags, run_pipeline, write_json
from .projection import ALL_VIEWS, back_project, load_hits_json, project_view, \
    save_hits_json
from .segmentation import UnfittableFlowerError, segment_flower
from .synth import load_membership_csv, make_plant, save_scene

ENV_PREFIX = "BLOOMPOSE_"


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _load_config(args) -> PipelineConfig:
    if args.config:
        return load_config(args.config)
    return PipelineConfig()


def _add_common(sub, out_required: bool = True) -> None:
    sub.add_argument("--config", default=_env("CONFIG"),
                     help="JSON config file (default: built-in defaults)")
    sub.add_argument("--out", required=out_required and _env("OUT") is None,
                     default=_env("OUT"), help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bloompose",
        description="Flower detection and pose estimation in plant point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic plant scene")
    _add_common(p)
    p.add_argument("--flowers", type=int, default=None, help="flower count override")
    p.add_argument("--seed", type=int, default=_env("SEED"), help="RNG seed override")

    p = sub.add_parser("project", help="render the six orthographic views")
    _add_common(p)
    p.add_argument("--input", required=True, help="input PLY cloud")

    p = sub.add_parser("detect", help="detect flower boxes in one raster")
    _add_common(p)
    p.add_argument("--input", required=True, help="input PNG raster")
    p.add_argument("--detector", choices=("builtin", "external"),
                   default=_env("DETECTOR"), help="detector kind override")

    p = sub.add_parser("extract", help="extract per-flower clouds from a scan")
    _add_common(p)
    p.add_argument("--input", required=True, help="input PLY cloud")
    p.add_argument("--views", default=None,
                   help="directory with projected views and box records "
                        "(default: project and detect internally)")
    p.add_argument("--detector", choices=("builtin", "external"),
                   default=_env("DETECTOR"))
    p.add_argument("--threads", type=int, default=_env("THREADS"))

    p = sub.add_parser("segment", help="split one flower cloud into petals and pistil")
    _add_common(p)
    p.add_argument("--input", required=True, help="flower candidate PLY")

    p = sub.add_parser("fit", help="fit pose models to petal clouds")
    _add_common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--input", help="petal PLY (single flower)")
    group.add_argument("--flowers", help="extract-output flowers directory")

    p = sub.add_parser("evaluate", help="score poses against ground truth")
    _add_common(p)
    p.add_argument("--poses", required=True, help="poses.json from fit or run")
    p.add_argument("--ground-truth", required=True, help="ground-truth labels JSON")
    p.add_argument("--plant-id", default=None, help="row label (default: poses stem)")
    p.add_argument("--membership", default=None, help="membership CSV (synthetic scenes)")
    p.add_argument("--cloud", default=None, help="source PLY (needed with --membership)")
    p.add_argument("--flowers", default=None,
                   help="flowers directory (needed with --membership)")

    p = sub.add_parser("select-frames", help="pick the sharpest frame per bin")
    _add_common(p, out_required=False)
    p.add_argument("--input", required=True, help="directory of PNG frames")
    p.add_argument("--bins", type=int, required=True, help="number of sequential bins")

    p = sub.add_parser("run", help="run the full pipeline on one scan")
    _add_common(p)
    p.add_argument("--input", required=_env("INPUT") is None,
                   default=_env("INPUT"), help="input PLY")
    p.add_argument("--ground-truth", default=_env("GROUND_TRUTH"))
    p.add_argument("--membership", default=None, help="membership CSV (synthetic scenes)")
    p.add_argument("--detector", choices=("builtin", "external"),
                   default=_env("DETECTOR"))
    p.add_argument("--threads", type=int, default=_env("THREADS"))
    p.add_argument("--seed", type=int, default=_env("SEED"))

    p = sub.add_parser("init-config", help="write the default config file")
    p.add_argument("--out", required=True, help="destination JSON path")
    return parser


def _with_overrides(config: PipelineConfig, args) -> PipelineConfig:
    import dataclasses

    updates = {}
    if getattr(args, "detector", None):
        updates["detector"] = dataclasses.replace(config.detector, kind=args.detector)
    if getattr(args, "threads", None):
        updates["threads"] = int(args.threads)
    if getattr(args, "seed", None) is not None:
        updates["seed"] = int(args.seed)
    return dataclasses.replace(config, **updates) if updates else config


def cmd_synth(args) -> int:
    config = _with_overrides(_load_config(args), args)
    synth = config.synth
    n_flowers = args.flowers if args.flowers is not None else synth.n_flowers
    scene = make_plant(
        n_flowers, synth.bed(), foliage_density=synth.foliage_density,
        seed=config.seed, petal_radius=synth.petal_radius,
        pistil_radius=synth.pistil_radius, point_density=synth.point_density,
        noise_sigma=synth.noise_sigma,
        curvature_range=(synth.curvature_min, synth.curvature_max))
    paths = save_scene(scene, args.out)
    print(f"wrote {len(scene.cloud)} points, {len(scene.labels)} flowers "
          f"-> {paths['cloud']}")
    return 0


def cmd_project(args) -> int:
    config = _load_config(args)
    cloud = load_ply(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    raster = config.raster
    for direction in ALL_VIEWS:
        view = project_view(cloud, direction, raster.width, raster.height,
                            raster.resolution)
        save_png(view.image, out_dir / f"view_{direction.label}.png")
        save_hits_json(view, out_dir / f"view_{direction.label}.hits.json")
    print(f"wrote 6 views -> {out_dir}")
    return 0


def cmd_detect(args) -> int:
    config = _with_overrides(_load_config(args), args)
    image = load_png(args.input)
    detector = detector_from_config(config)
    boxes = detector.detect(image)
    payload = {
        "image": Path(args.input).name,
        "width": int(image.shape[1]),
        "height": int(image.shape[0]),
        "boxes": [{"x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max,
                   "y_max": b.y_max, "score": b.score} for b in boxes],
    }
    write_json(Path(args.out), payload)
    print(f"{len(boxes)} boxes -> {args.out}")
    return 0


def _boxes_from_json(path: Path) -> list[BBox2D]:
    payload = json.loads(path.read_text())
    return [BBox2D(x_min=int(b["x_min"]), x_max=int(b["x_max"]),
                   y_min=int(b["y_min"]), y_max=int(b["y_max"]),
                   score=float(b["score"])) for b in payload["boxes"]]


def cmd_extract(args) -> int:
    config = _with_overrides(_load_config(args), args)
    cloud = load_ply(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.views:
        views_dir = Path(args.views)
        parts = []
        for direction in ALL_VIEWS:
            image = load_png(views_dir / f"view_{direction.label}.png")
            view = load_hits_json(cloud, image,
                                  views_dir / f"view_{direction.label}.hits.json")
            boxes = [b for b in _boxes_from_json(
                         views_dir / f"view_{direction.label}.boxes.json")
                     if b.score >= config.detector.score_threshold]
            parts.extend(back_project(view, box) for box in boxes)
        union = concat_clouds(parts)
        flowers: list[PointCloud] = []
        if len(union):
            if len(union) > config.outliers.statistical_k:
                union = statistical_outlier_removal(
                    union, config.outliers.statistical_k,
                    config.outliers.statistical_std_ratio)
            union = radius_outlier_removal(union, config.outliers.radius,
                                           config.outliers.radius_min_neighbors)
            labeling = dbscan(union, config.dbscan.eps, config.dbscan.min_points)
            flowers = cluster_clouds(union, labeling)
    else:
        from .pipeline import run_extraction
        detector = detector_from_config(config)
        flowers = run_extraction(cloud, detector, config,
                                 threads=config.threads).flowers

    records = []
    for i, flower in enumerate(flowers):
        name = f"flower_{i:03d}"
        flower_dir = out_dir / "flowers" / name
        flower_dir.mkdir(parents=True, exist_ok=True)
        save_ply(flower, flower_dir / "candidate.ply", binary=True)
        records.append({"id": name, "points": len(flower),
                        "centroid": [float(v) for v in centroid(flower)]})
    write_json(out_dir / "detections.json",
               {"count": len(flowers), "detections": records})
    print(f"{len(flowers)} flower candidates -> {out_dir}")
    return 0


def _segment_one(flower_path: Path, out_dir: Path, config: PipelineConfig,
                 name: str) -> dict:
    flower = load_ply(flower_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"id": name, "points": len(flower)}
    try:
        segment = segment_flower(flower, config.segmentation_params())
    except UnfittableFlowerError as exc:
        record.update({"status": "unfittable", "reason": str(exc)})
        write_json(out_dir / "segment.json", record)
        return record
    save_ply(segment.petals, out_dir / "petals.ply", binary=True)
    save_ply(segment.pistil, out_dir / "pistil.ply", binary=True)
    record.update({
        "status": "ok",
        "petal_points": len(segment.petals),
        "pistil_points": len(segment.pistil),
        "petal_centroid": [float(v) for v in segment.petal_centroid],
        "pistil_centroid": None if segment.pistil_centroid is None
        else [float(v) for v in segment.pistil_centroid],
        "flower_centroid": [float(v) for v in segment.flower_centroid],
    })
    write_json(out_dir / "segment.json", record)
    return record


def cmd_segment(args) -> int:
    config = _load_config(args)
    record = _segment_one(Path(args.input), Path(args.out), config,
                          name=Path(args.input).stem)
    print(f"{record['status']} -> {args.out}")
    return 0


def _fit_from_segment(petals_path: Path, segment: dict, config: PipelineConfig) -> dict:
    petals = load_ply(petals_path)
    petal_centroid = centroid(petals)
    centered = PointCloud(petals.positions - petal_centroid, petals.colors)
    pistil_centroid = segment.get("pistil_centroid")
    pistil_centroid = None if pistil_centroid is None else np.asarray(pistil_centroid)
    flower_centroid = np.asarray(segment.get("flower_centroid", petal_centroid))
    fit = config.fit
    estimates = {}
    fit_errors = {}
    try:
        se_fit = fit_superellipsoid(centered, tol=fit.tol, max_iter=fit.max_iter,
                                    axis_bound=fit.axis_bound,
                                    exponent_bounds=(fit.exponent_min, fit.exponent_max))
        estimates["superellipsoid"] = superellipsoid_pose(se_fit, flower_centroid,
                                                          pistil_centroid)
    except (ValueError, SolverDivergenceError) as exc:
        fit_errors["superellipsoid"] = str(exc)
    try:
        estimates["paraboloid"] = fit_paraboloid(
            centered, pistil_centroid, flower_centroid, tol=fit.tol,
            max_iter=fit.max_iter, init_scale=fit.paraboloid_init)
    except (ValueError, SolverDivergenceError) as exc:
        fit_errors["paraboloid"] = str(exc)
    try:
        estimates["plane"] = fit_plane(centered, flower_centroid, pistil_centroid)
    except (ValueError, DegenerateGeometryError) as exc:
        fit_errors["plane"] = str(exc)
    record = {"estimates": {m: estimate_record(e) for m, e in estimates.items()}}
    if fit_errors:
        record["fit_errors"] = dict(sorted(fit_errors.items()))
    return record


def cmd_fit(args) -> int:
    config = _load_config(args)
    if args.input:
        petals_path = Path(args.input)
        segment_path = petals_path.parent / "segment.json"
        segment = json.loads(segment_path.read_text()) if segment_path.exists() else {}
        record = _fit_from_segment(petals_path, segment, config)
        record["id"] = segment.get("id", petals_path.stem)
        write_json(Path(args.out), record)
        print(f"{len(record['estimates'])} pose records -> {args.out}")
        return 0

    flowers_dir = Path(args.flowers)
    flower_records = []
    for flower_dir in sorted(p for p in flowers_dir.iterdir() if p.is_dir()):
        segment = json.loads((flower_dir / "segment.json").read_text())
        candidate = load_ply(flower_dir / "candidate.ply")
        record = {
            "id": segment["id"],
            "points": len(candidate),
            "centroid": [float(v) for v in centroid(candidate)],
            "status": segment["status"],
            "estimates": {},
        }
        if segment["status"] == "ok":
            fitted = _fit_from_segment(flower_dir / "petals.ply", segment, config)
            record["estimates"] = fitted["estimates"]
            if "fit_errors" in fitted:
                record["fit_errors"] = fitted["fit_errors"]
            record["petal_points"] = segment["petal_points"]
            record["pistil_points"] = segment["pistil_points"]
        else:
            record["reason"] = segment["reason"]
        flower_records.append(record)
    write_json(Path(args.out), {"flowers": flower_records})
    print(f"{len(flower_records)} flowers -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    poses = json.loads(Path(args.poses).read_text())
    labels = load_labels(args.ground_truth)
    flowers = poses["flowers"]
    centroids = np.array([f["centroid"] for f in flowers]).reshape(-1, 3)
    directions = [
        {m: np.asarray(e["direction"]) for m, e in f["estimates"].items()}
        for f in flowers
    ]

    overlap_flags = None
    if args.membership:
        if not (args.cloud and args.flowers):
            raise StageError("evaluate", "--membership needs --cloud and --flowers")
        from .pipeline import FlowerOutcome
        membership = load_membership_csv(args.membership)
        cloud = load_ply(args.cloud)
        outcomes = []
        for i, record in enumerate(flowers):
            candidate = load_ply(Path(args.flowers) / record["id"] / "candidate.ply")
            outcomes.append(FlowerOutcome(index=i, cloud=candidate,
                                          flower_centroid=np.asarray(record["centroid"]),
                                          status=record["status"]))
        overlap_flags = label_overlap_flags(outcomes, cloud, membership)

    plant_id = args.plant_id or Path(args.poses).stem
    report = evaluate_records(centroids, directions, labels,
                              config.matching.max_dist, plant_id,
                              overlap_flags=overlap_flags)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "report.json", report)
    from .evaluation import check_gates, render_table
    (out_dir / "report.txt").write_text(render_table(report))
    violations = check_gates(report, config.gates.min_detection_rate_pct,
                             config.gates.max_mean_plane_error_deg)
    print(render_table(report), end="")
    for violation in violations:
        print(f"gate violated: {violation}", file=sys.stderr)
    return 1 if violations else 0


def cmd_select_frames(args) -> int:
    config = _load_config(args)
    frame_dir = Path(args.input)
    paths = sorted(p for p in frame_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise StageError("select-frames", f"no image frames in {frame_dir}")
    scores = []
    for index, path in enumerate(paths):
        with Image.open(path) as frame:
            gray = np.asarray(frame.convert("L"), dtype=np.float64) / 255.0
        scores.append(FrameScore(frame_index=index,
                                 sharpness=sharpness_score(
                                     gray, config.capture.center_fraction)))
    selected = select_frames(scores, args.bins)
    lines = [f"{i} {paths[i].name}" for i in selected]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_run(args) -> int:
    config = _with_overrides(_load_config(args), args)
    membership = load_membership_csv(args.membership) if args.membership else None
    return run_pipeline(args.input, config, args.out,
                        ground_truth_path=args.ground_truth,
                        membership=membership, threads=config.threads)


def cmd_init_config(args) -> int:
    save_config(PipelineConfig(), args.out)
    print(f"wrote defaults -> {args.out}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "detect": cmd_detect,
    "extract": cmd_extract,
    "segment": cmd_segment,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "select-frames": cmd_select_frames,
    "run": cmd_run,
    "init-config": cmd_init_config,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(ENV_PREFIX + "LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code) if exc.code else 0
    try:
        return _HANDLERS[args.command](args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
