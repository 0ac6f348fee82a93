import numpy as np
import pytest

from bloompose.cloud import Aabb, load_ply
from bloompose.fitting import angular_error, fit_paraboloid
from bloompose.cloud import PointCloud
from bloompose.synth import (
    FOLIAGE,
    GROUND,
    PETAL,
    PISTIL,
    SyntheticFlowerSpec,
    load_membership_csv,
    make_flower,
    make_plant,
    save_scene,
)

UP = np.array([0.0, 0.0, 1.0])
BED = Aabb([-0.3, -0.3, 0.0], [0.3, 0.3, 0.35])


def spec(**kwargs):
    defaults = dict(center=np.zeros(3), direction=UP)
    defaults.update(kwargs)
    return SyntheticFlowerSpec(**defaults)


class TestMakeFlower:
    def test_flat_disk_is_planar(self):
        flower, membership = make_flower(spec(cup_curvature=0.0), noise_sigma=0.0,
                                         seed=1)
        petal_mask = membership.roles == PETAL
        heights = flower.positions[petal_mask] @ UP
        assert np.abs(heights).max() <= 1e-12

    def test_fixed_seed_bit_identical(self):
        a, _ = make_flower(spec(), noise_sigma=0.001, seed=9)
        b, _ = make_flower(spec(), noise_sigma=0.001, seed=9)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.colors, b.colors)

    def test_different_seed_differs(self):
        a, _ = make_flower(spec(), seed=1)
        b, _ = make_flower(spec(), seed=2)
        assert not np.array_equal(a.positions, b.positions)

    def test_cupped_flower_recovers_direction(self):
        direction = np.array([0.3, -0.2, 0.93])
        direction /= np.linalg.norm(direction)
        flower, membership = make_flower(spec(direction=direction, cup_curvature=0.5),
                                         noise_sigma=0.0, seed=3)
        petals = flower.select(membership.roles == PETAL)
        centered = PointCloud(petals.positions - petals.positions.mean(axis=0),
                              petals.colors)
        pistil = flower.select(membership.roles == PISTIL)
        estimate = fit_paraboloid(centered, pistil.positions.mean(axis=0),
                                  flower.positions.mean(axis=0))
        assert angular_error(estimate.direction, direction) <= 1.0

    def test_pistil_sits_past_petal_mean_height(self):
        for curvature in (-0.5, 0.0, 0.7):
            flower, membership = make_flower(spec(cup_curvature=curvature),
                                             noise_sigma=0.0, seed=4)
            petal_mean = flower.positions[membership.roles == PETAL].mean(axis=0)
            pistil_mean = flower.positions[membership.roles == PISTIL].mean(axis=0)
            assert (pistil_mean - petal_mean) @ UP > 0

    def test_unit_direction_required(self):
        with pytest.raises(ValueError, match="unit"):
            SyntheticFlowerSpec(center=np.zeros(3), direction=np.array([0, 0, 2.0]))

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError):
            make_flower(spec(), noise_sigma=-0.1)


class TestMakePlant:
    def test_zero_flowers_is_foliage_only(self):
        scene = make_plant(0, BED, foliage_density=50_000, seed=5)
        assert scene.labels == []
        roles = set(np.unique(scene.membership.roles))
        assert roles <= {FOLIAGE, GROUND}
        assert (scene.membership.flower_ids == -1).all()

    def test_three_flowers_with_membership(self):
        scene = make_plant(3, BED, foliage_density=50_000, seed=6,
                           noise_sigma=0.0005)
        assert len(scene.labels) == 3
        sigma = 0.0005
        for i, label in enumerate(scene.labels):
            mask = (scene.membership.flower_ids == i) & (scene.membership.roles == PETAL)
            assert mask.sum() > 0
            dists = np.linalg.norm(scene.cloud.positions[mask] - label.position, axis=1)
            # petal points stay within the disk radius plus curvature height
            # and noise margin
            assert dists.max() <= 0.025 * (1 + 0.9) + 3 * sigma

    def test_membership_partitions_cloud(self):
        scene = make_plant(2, BED, foliage_density=30_000, seed=7)
        assert len(scene.membership.roles) == len(scene.cloud)
        assert len(scene.membership.flower_ids) == len(scene.cloud)
        on_flower = scene.membership.flower_ids >= 0
        assert set(np.unique(scene.membership.roles[on_flower])) == {PETAL, PISTIL}
        assert set(np.unique(scene.membership.roles[~on_flower])) <= {FOLIAGE, GROUND}

    def test_labels_match_specs_exactly(self):
        scene = make_plant(4, BED, foliage_density=0, seed=8)
        for label in scene.labels:
            assert abs(np.linalg.norm(label.direction) - 1.0) <= 1e-12
        centers = np.array([label.position for label in scene.labels])
        dists = np.linalg.norm(centers[:, None] - centers[None], axis=2)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() >= 4 * 0.025

    def test_determinism(self):
        a = make_plant(3, BED, foliage_density=40_000, seed=11)
        b = make_plant(3, BED, foliage_density=40_000, seed=11)
        assert np.array_equal(a.cloud.positions, b.cloud.positions)
        assert np.array_equal(a.cloud.colors, b.cloud.colors)
        assert np.array_equal(a.membership.roles, b.membership.roles)

    def test_overcrowded_bed_rejected(self):
        tiny = Aabb([0, 0, 0], [0.08, 0.08, 0.1])
        with pytest.raises(ValueError, match="too small"):
            make_plant(12, tiny, seed=12)

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            make_plant(-1, BED)


class TestSceneIo:
    def test_save_scene_roundtrip(self, tmp_path):
        scene = make_plant(2, BED, foliage_density=20_000, seed=13)
        paths = save_scene(scene, tmp_path)
        cloud = load_ply(paths["cloud"])
        assert np.array_equal(cloud.positions, scene.cloud.positions)
        assert np.abs(cloud.colors - scene.cloud.colors).max() <= 1 / 255
        membership = load_membership_csv(paths["membership"])
        assert np.array_equal(membership.roles, scene.membership.roles)
        assert np.array_equal(membership.flower_ids, scene.membership.flower_ids)

    def test_saved_scene_is_byte_deterministic(self, tmp_path):
        scene_a = make_plant(2, BED, foliage_density=20_000, seed=14)
        scene_b = make_plant(2, BED, foliage_density=20_000, seed=14)
        save_scene(scene_a, tmp_path / "a")
        save_scene(scene_b, tmp_path / "b")
        for name in ("scene.ply", "ground_truth.json", "membership.csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()
