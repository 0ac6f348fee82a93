"""Flower detection and pose estimation in colored 3D plant point clouds."""

from .cloud import (
    Aabb,
    HsvColor,
    PlyParseError,
    PointCloud,
    centroid,
    concat_clouds,
    crop_outside,
    empty_cloud,
    hsv_to_rgb,
    load_ply,
    radius_outlier_removal,
    rgb_to_hsv,
    save_ply,
    statistical_outlier_removal,
)
from .clustering import BBox3D, ClusterLabeling, bounding_cuboids, cluster_clouds, dbscan
from .config import ConfigError, PipelineConfig, load_config, save_config
from .detection import (
    BBox2D,
    ColorThresholdDetector,
    Detector,
    ExchangeProtocolError,
    ExchangeTimeoutError,
    ExternalDetector,
    color_threshold_detect,
    external_detect,
    load_png,
    save_png,
)
from .evaluation import (
    GroundTruthLabel,
    MatchResult,
    PlantRecord,
    build_report,
    detection_rate,
    load_labels,
    match_detections,
    render_table,
    save_labels,
    summarize,
)
from .fitting import (
    DegenerateGeometryError,
    EulerAngles,
    ParaboloidFit,
    PlaneFit,
    PoseEstimate,
    SolveResult,
    SolverDivergenceError,
    SuperellipsoidFit,
    angular_error,
    fit_paraboloid,
    fit_plane,
    fit_superellipsoid,
    lm_solve,
    rotation_matrix,
    superellipsoid_pose,
    trf_solve,
)
from .capture import FrameScore, select_frames, sharpness_score
from .pipeline import (
    ExtractionResult,
    FlowerOutcome,
    StageError,
    analyze_flowers,
    extract_flowers,
    run_extraction,
    run_pipeline,
)
from .projection import (
    ALL_VIEWS,
    DegenerateExtentError,
    ViewDirection,
    ViewProjection,
    back_project,
    project_view,
)
from .segmentation import (
    FlowerSegment,
    HsvRange,
    SegmentationParams,
    UnfittableFlowerError,
    filter_by_hsv,
    segment_flower,
    select_pistil,
)
from .synth import (
    PointMembership,
    SyntheticFlowerSpec,
    SyntheticScene,
    make_flower,
    make_plant,
    save_scene,
)

__version__ = "0.1.0"
