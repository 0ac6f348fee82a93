"""Ground-truth labels, detection matching, and the results table.

The report mirrors the field-trial layout: one row per plant (ground-truth
count, flowers found and percentage, extras, false positives, per-method mean
angular error) plus aggregate mean/median/standard deviation computed over
the individual flower errors, never over per-plant means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METHOD_ORDER = ("superellipsoid", "paraboloid", "plane")


@dataclass(frozen=True)
class GroundTruthLabel:
    """Hand- or generator-specified flower position and unit direction."""

    id: str
    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        position = np.asarray(self.position, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(direction))
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"label {self.id!r}: direction norm {norm} is not 1")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "direction", direction / norm)


def save_labels(labels: list[GroundTruthLabel], path: str | Path) -> None:
    records = [
        {"id": lab.id, "position": [float(v) for v in lab.position],
         "direction": [float(v) for v in lab.direction]}
        for lab in labels
    ]
    Path(path).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")


def load_labels(path: str | Path) -> list[GroundTruthLabel]:
    records = json.loads(Path(path).read_text())
    return [GroundTruthLabel(id=str(r["id"]), position=r["position"],
                             direction=r["direction"]) for r in records]


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching detections against labels.

    Each detection index and each label id appears in at most one field:
    matched pairs, unmatched detections (extra), unmatched labels (missed).
    """

    matched: list[tuple[int, str]]
    extra: list[int]
    missed: list[str]


def match_detections(flower_centroids, labels: list[GroundTruthLabel],
                     max_dist: float = 0.05) -> MatchResult:
    """Greedy nearest-pair matching by ascending centroid-label distance.

    Pairs farther apart than max_dist never match. Ties in distance resolve
    by (detection index, label order), so the matched pair set is stable
    under permuting the detections.
    """
    if max_dist <= 0:
        raise ValueError(f"max_dist must be > 0, got {max_dist}")
    centroids = np.asarray(flower_centroids, dtype=np.float64).reshape(-1, 3)
    pairs = []
    for d, c in enumerate(centroids):
        for l, lab in enumerate(labels):
            dist = float(np.linalg.norm(c - lab.position))
            if dist <= max_dist:
                pairs.append((dist, d, l))
    pairs.sort()
    det_used = set()
    lab_used = set()
    matched = []
    for dist, d, l in pairs:
        if d in det_used or l in lab_used:
            continue
        det_used.add(d)
        lab_used.add(l)
        matched.append((d, labels[l].id))
    extra = [d for d in range(len(centroids)) if d not in det_used]
    missed = [lab.id for l, lab in enumerate(labels) if l not in lab_used]
    return MatchResult(matched=matched, extra=extra, missed=missed)


def detection_rate(found: int, ground_truth: int) -> float:
    """Percentage of ground-truth flowers found, to one decimal place."""
    if ground_truth <= 0:
        raise ValueError("ground_truth count must be positive")
    return round(100.0 * found / ground_truth, 1)


def summarize(errors: dict[str, list[float]]) -> dict[str, dict[str, float]]:
    """Mean, median (midpoint rule), population std per method.

    Raises:
        ValueError: any method has an empty error list.
    """
    out = {}
    for method, values in errors.items():
        if len(values) == 0:
            raise ValueError(f"no errors recorded for method {method!r}")
        arr = np.asarray(values, dtype=np.float64)
        out[method] = {
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "std": float(arr.std()),
        }
    return out


@dataclass
class PlantRecord:
    """Inputs to one report row; errors hold (label id, degrees) per method."""

    plant_id: str
    ground_truth: int
    found: int
    extra: int
    false_positives: int
    errors: dict[str, list[tuple[str, float]]] = field(default_factory=dict)


def classify_extras(match: MatchResult, overlaps_label: list[bool]) -> tuple[list[int], list[int]]:
    """Splits unmatched detections into extras and false positives.

    A false positive overlaps no labeled flower's true point set (a leaf or
    clutter detection); the remaining unmatched detections are extras.
    ``overlaps_label`` is indexed by detection.
    """
    extras, false_positives = [], []
    for d in match.extra:
        (extras if overlaps_label[d] else false_positives).append(d)
    return extras, false_positives


def build_report(plants: list[PlantRecord]) -> dict:
    """Aggregates plant rows into a JSON-ready report.

    The aggregate statistics are recomputed from the per-flower error records
    embedded in each row (never from per-plant means), so the report is
    self-consistent by construction.
    """
    rows = []
    pooled: dict[str, list[float]] = {}
    total_gt = 0
    total_found = 0
    total_extra = 0
    total_fp = 0
    for plant in plants:
        total_gt += plant.ground_truth
        total_found += plant.found
        total_extra += plant.extra
        total_fp += plant.false_positives
        mean_errors = {}
        error_records = {}
        for method, pairs in plant.errors.items():
            values = [deg for _, deg in pairs]
            if values:
                mean_errors[method] = float(np.mean(values))
                pooled.setdefault(method, []).extend(values)
            error_records[method] = [
                {"label": label, "degrees": float(deg)} for label, deg in pairs
            ]
        rows.append({
            "plant_id": plant.plant_id,
            "ground_truth": plant.ground_truth,
            "found": plant.found,
            "found_pct": detection_rate(plant.found, plant.ground_truth)
            if plant.ground_truth else None,
            "extra": plant.extra,
            "false_positives": plant.false_positives,
            "mean_error_deg": mean_errors,
            "errors": error_records,
        })
    aggregate = {
        "ground_truth": total_gt,
        "found": total_found,
        "found_pct": detection_rate(total_found, total_gt) if total_gt else None,
        "extra": total_extra,
        "false_positives": total_fp,
        "per_method": summarize(pooled) if pooled else {},
    }
    return {"plants": rows, "aggregate": aggregate}


def render_table(report: dict) -> str:
    """Aligned-text table of the report (one row per plant plus summary rows)."""
    headers = ["Plant ID", "GT", "Found (%)", "Extra", "FP",
               "Superellipsoid", "Paraboloid", "Plane"]
    rows = []
    for row in report["plants"]:
        means = row["mean_error_deg"]
        rows.append([
            row["plant_id"], str(row["ground_truth"]),
            f"{row['found']} ({row['found_pct']})" if row["found_pct"] is not None
            else str(row["found"]),
            str(row["extra"]), str(row["false_positives"]),
            *(f"{means[m]:.1f}°" if m in means else "-" for m in METHOD_ORDER),
        ])
    agg = report["aggregate"]
    rows.append(["Total", str(agg["ground_truth"]),
                 f"{agg['found']} ({agg['found_pct']})",
                 str(agg["extra"]), str(agg["false_positives"]), "-", "-", "-"])
    per_method = agg["per_method"]
    for stat in ("mean", "median", "std"):
        rows.append([stat.capitalize(), "-", "-", "-", "-",
                     *(f"{per_method[m][stat]:.1f}°" if m in per_method else "-"
                       for m in METHOD_ORDER)])
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    return "\n".join(lines) + "\n"


def check_gates(report: dict, min_detection_rate_pct: float | None = None,
                max_mean_plane_error_deg: float | None = None) -> list[str]:
    """Returns human-readable gate violations (empty when all gates pass)."""
    violations = []
    agg = report["aggregate"]
    if min_detection_rate_pct is not None and agg["found_pct"] is not None:
        if agg["found_pct"] < min_detection_rate_pct:
            violations.append(
                f"detection rate {agg['found_pct']}% below {min_detection_rate_pct}%")
    if max_mean_plane_error_deg is not None:
        plane = agg["per_method"].get("plane")
        if plane is not None and plane["mean"] > max_mean_plane_error_deg:
            violations.append(
                f"mean plane error {plane['mean']:.2f} deg above "
                f"{max_mean_plane_error_deg} deg")
    return violations
