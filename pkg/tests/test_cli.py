import json

import numpy as np
import pytest
from PIL import Image

from bloompose.cli import main
from bloompose.cloud import Aabb, PointCloud, save_ply
from bloompose.config import config_from_dict, save_config
from bloompose.detection import load_png
from bloompose.synth import make_plant, save_scene

BED = Aabb([-0.3, -0.3, 0.0], [0.3, 0.3, 0.35])
FAST = {"raster": {"width": 384, "height": 384, "resolution": 5}}


@pytest.fixture(scope="module")
def fast_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "config.json"
    save_config(config_from_dict(dict(FAST)), path)
    return path


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    scene = make_plant(3, BED, foliage_density=50_000, seed=201)
    save_scene(scene, out)
    return out


def test_unknown_subcommand_prints_usage(capsys):
    code = main(["frobnicate"])
    assert code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_required_flag(capsys):
    assert main(["project"]) == 2


def test_synth_writes_scene(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "s"), "--flowers", "2",
                 "--seed", "7"])
    assert code == 0
    assert (tmp_path / "s" / "scene.ply").exists()
    assert (tmp_path / "s" / "ground_truth.json").exists()
    assert (tmp_path / "s" / "membership.csv").exists()


def test_init_config_roundtrip(tmp_path):
    path = tmp_path / "defaults.json"
    assert main(["init-config", "--out", str(path)]) == 0
    data = json.loads(path.read_text())
    assert data["dbscan"] == {"eps": 0.01, "min_points": 20}


def test_project_single_point_cloud(tmp_path, fast_config_path):
    ply = tmp_path / "one.ply"
    save_ply(PointCloud([[0.1, 0.2, 0.3]], [[1.0, 0.0, 0.0]]), ply)
    out = tmp_path / "views"
    code = main(["project", "--input", str(ply), "--out", str(out),
                 "--config", str(fast_config_path)])
    assert code == 0
    resolution = 5
    disk = sum(1 for r in range(-resolution, resolution + 1)
               for c in range(-resolution, resolution + 1)
               if r * r + c * c <= resolution * resolution)
    for label in ("x+", "x-", "y+", "y-", "z+", "z-"):
        image = load_png(out / f"view_{label}.png")
        painted = (image != 128).any(axis=2)
        assert painted.sum() == disk  # exactly one splat
        assert (image[painted] == [255, 0, 0]).all()
        assert (out / f"view_{label}.hits.json").exists()


def test_detect_on_raster(tmp_path, fast_config_path):
    image = np.full((64, 64, 3), (40, 160, 60), dtype=np.uint8)
    image[20:40, 10:30] = (250, 250, 250)
    png = tmp_path / "img.png"
    Image.fromarray(image).save(png)
    out = tmp_path / "boxes.json"
    assert main(["detect", "--input", str(png), "--out", str(out),
                 "--config", str(fast_config_path)]) == 0
    payload = json.loads(out.read_text())
    assert len(payload["boxes"]) == 1
    box = payload["boxes"][0]
    assert (box["x_min"], box["x_max"], box["y_min"], box["y_max"]) == (10, 29, 20, 39)


def test_run_and_stage_chain_agree(tmp_path, scene_dir, fast_config_path):
    """File-handoff subcommand chain reproduces run_pipeline byte for byte."""
    run_out = tmp_path / "direct"
    code = main(["run", "--input", str(scene_dir / "scene.ply"),
                 "--config", str(fast_config_path), "--out", str(run_out),
                 "--ground-truth", str(scene_dir / "ground_truth.json"),
                 "--membership", str(scene_dir / "membership.csv")])
    assert code == 0

    work = tmp_path / "chain"
    views = work / "views"
    assert main(["project", "--input", str(scene_dir / "scene.ply"),
                 "--out", str(views), "--config", str(fast_config_path)]) == 0
    for label in ("x+", "x-", "y+", "y-", "z+", "z-"):
        assert main(["detect", "--input", str(views / f"view_{label}.png"),
                     "--out", str(views / f"view_{label}.boxes.json"),
                     "--config", str(fast_config_path)]) == 0
    extract_out = work / "extract"
    assert main(["extract", "--input", str(scene_dir / "scene.ply"),
                 "--views", str(views), "--out", str(extract_out),
                 "--config", str(fast_config_path)]) == 0
    assert ((extract_out / "detections.json").read_bytes()
            == (run_out / "detections.json").read_bytes())

    flowers_dir = extract_out / "flowers"
    for flower in sorted(p for p in flowers_dir.iterdir() if p.is_dir()):
        assert main(["segment", "--input", str(flower / "candidate.ply"),
                     "--out", str(flower), "--config", str(fast_config_path)]) == 0
        # align the record id with the flower directory name
        record = json.loads((flower / "segment.json").read_text())
        record["id"] = flower.name
        (flower / "segment.json").write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n")
    poses = work / "poses.json"
    assert main(["fit", "--flowers", str(flowers_dir), "--out", str(poses),
                 "--config", str(fast_config_path)]) == 0
    assert poses.read_bytes() == (run_out / "poses.json").read_bytes()

    eval_out = work / "eval"
    assert main(["evaluate", "--poses", str(poses),
                 "--ground-truth", str(scene_dir / "ground_truth.json"),
                 "--plant-id", "scene",
                 "--membership", str(scene_dir / "membership.csv"),
                 "--cloud", str(scene_dir / "scene.ply"),
                 "--flowers", str(flowers_dir),
                 "--out", str(eval_out), "--config", str(fast_config_path)]) == 0
    assert ((eval_out / "report.json").read_bytes()
            == (run_out / "report.json").read_bytes())


def test_fit_on_petal_ply_matches_library(tmp_path, fast_config_path):
    from bloompose.cloud import centroid, load_ply
    from bloompose.fitting import fit_plane
    from bloompose.synth import SyntheticFlowerSpec, make_flower
    from bloompose.segmentation import segment_flower

    spec = SyntheticFlowerSpec(center=np.zeros(3), direction=np.array([0, 0, 1.0]),
                               cup_curvature=0.4)
    flower, _ = make_flower(spec, noise_sigma=0.0, seed=11)
    segment = segment_flower(flower)
    petals_ply = tmp_path / "petals.ply"
    save_ply(segment.petals, petals_ply, binary=True)

    out = tmp_path / "pose.json"
    assert main(["fit", "--input", str(petals_ply), "--out", str(out),
                 "--config", str(fast_config_path)]) == 0
    record = json.loads(out.read_text())
    assert set(record["estimates"]) == {"superellipsoid", "paraboloid", "plane"}

    petals = load_ply(petals_ply)
    centered = PointCloud(petals.positions - centroid(petals), petals.colors)
    expected = fit_plane(centered, centroid(petals), None)
    assert np.allclose(record["estimates"]["plane"]["direction"],
                       expected.direction, atol=1e-12)


def test_select_frames_cli(tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    rng = np.random.default_rng(0)
    base = rng.integers(0, 255, (32, 32), dtype=np.uint8)
    for i, blur in enumerate([5, 0, 3, 4, 1, 2]):  # frame 1 sharpest, then 4
        from scipy.ndimage import gaussian_filter
        frame = gaussian_filter(base.astype(float), sigma=blur) if blur else base
        Image.fromarray(frame.astype(np.uint8), mode="L").save(
            frames / f"frame_{i:03d}.png")
    out = tmp_path / "selected.txt"
    assert main(["select-frames", "--input", str(frames), "--bins", "2",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split()[0] == "1"
    assert lines[1].split()[0] == "4"


def test_run_determinism(tmp_path, scene_dir, fast_config_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--input", str(scene_dir / "scene.ply"),
                     "--config", str(fast_config_path), "--out", str(out),
                     "--ground-truth", str(scene_dir / "ground_truth.json")]) == 0
        outs.append(out)
    for artifact in ("poses.json", "detections.json", "report.json"):
        assert (outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes()


def test_run_error_is_stage_tagged(tmp_path, capsys):
    code = main(["run", "--input", str(tmp_path / "no.ply"),
                 "--out", str(tmp_path / "out")])
    assert code == 1
    assert "[load]" in capsys.readouterr().err
