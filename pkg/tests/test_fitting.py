import numpy as np
import pytest

from bloompose.cloud import PointCloud
from bloompose.fitting import (
    DegenerateGeometryError,
    EulerAngles,
    SuperellipsoidFit,
    angular_error,
    euler_from_matrix,
    finite_difference_jacobian,
    fit_paraboloid,
    fit_plane,
    fit_superellipsoid,
    lm_solve,
    paraboloid_jacobian,
    paraboloid_residual,
    rotation_matrix,
    superellipsoid_jacobian,
    superellipsoid_residual,
    superellipsoid_pose,
    trf_solve,
)


def as_cloud(points):
    points = np.asarray(points, dtype=np.float64)
    return PointCloud(points, np.full((len(points), 3), 0.9))


def random_rotation(rng):
    matrix = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(matrix)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def sphere_samples(rng, n, radius):
    direction = rng.normal(size=(n, 3))
    return direction / np.linalg.norm(direction, axis=1, keepdims=True) * radius


def ellipsoid_samples(rng, n, semi_axes, rotation=np.eye(3)):
    unit = sphere_samples(rng, n, 1.0)
    return (unit * np.asarray(semi_axes)) @ rotation.T


def paraboloid_samples(rng, n, a, b, extent, rotation=np.eye(3)):
    """Samples of z = (x/a)^2 + (y/b)^2 over a centrally-symmetric xy set.

    Mirrored sampling keeps the centered cloud symmetric about its axis, so
    the upright orientation is exactly stationary for the vertex-pinned
    model. The cup is shallow for extent << a, like a real corolla.
    """
    half = rng.uniform(-extent, extent, (n // 2, 2))
    xy = np.vstack([half, -half])
    z = (xy[:, 0] / a) ** 2 + (xy[:, 1] / b) ** 2
    local = np.column_stack([xy, z])
    return local @ rotation.T


class TestLmSolve:
    def test_linear_residual_three_iterations(self):
        result = lm_solve(lambda x: x - 3.0, np.array([0.0]))
        assert abs(result.params[0] - 3.0) <= 1e-10
        assert result.iterations <= 3
        assert result.converged

    def test_rosenbrock(self):
        def residual(x):
            return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

        result = lm_solve(residual, np.array([-1.2, 1.0]), tol=1e-12, max_iter=500)
        assert np.abs(result.params - 1.0).max() <= 1e-6
        assert result.residual_norm <= 1e-6

    def test_nan_at_start_rejected(self):
        with pytest.raises(ValueError, match="not finite"):
            lm_solve(lambda x: np.array([np.nan]), np.array([0.0]))

    def test_residual_never_worse_than_start(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            target = rng.normal(size=3)

            def residual(x):
                return np.sin(x) - target

            x0 = rng.normal(size=3)
            result = lm_solve(residual, x0, max_iter=20)
            assert result.residual_norm <= np.linalg.norm(residual(x0)) + 1e-15

    def test_accepts_analytic_jacobian(self):
        result = lm_solve(lambda x: np.atleast_1d(x[0] - 3.0), np.array([0.0]),
                          jacobian=lambda x: np.array([[1.0]]))
        assert abs(result.params[0] - 3.0) <= 1e-10


class TestTrfSolve:
    def test_clamped_optimum_at_bound(self):
        result = trf_solve(lambda x: x - 5.0, np.array([0.5]),
                           lower=np.array([0.0]), upper=np.array([1.0]))
        assert result.params[0] == pytest.approx(1.0, abs=1e-8)

    def test_matches_lm_with_wide_bounds(self):
        def residual(x):
            return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

        x0 = np.array([-1.2, 1.0])
        wide = trf_solve(residual, x0, lower=np.full(2, -1e3), upper=np.full(2, 1e3),
                         tol=1e-12, max_iter=500)
        free = lm_solve(residual, x0, tol=1e-12, max_iter=500)
        assert np.abs(wide.params - free.params).max() <= 1e-6

    def test_infeasible_start_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            trf_solve(lambda x: x, np.array([2.0]),
                      lower=np.array([0.0]), upper=np.array([1.0]))

    def test_stays_in_bounds_and_improves(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            target = rng.uniform(-2, 2, size=2)

            def residual(x):
                return x - target

            x0 = np.array([0.1, 0.9])
            lower, upper = np.array([0.0, 0.0]), np.array([1.0, 1.0])
            result = trf_solve(residual, x0, lower, upper)
            assert (result.params >= lower).all() and (result.params <= upper).all()
            assert result.residual_norm <= np.linalg.norm(residual(x0)) + 1e-15


class TestSuperellipsoid:
    def test_sphere_recovery(self):
        rng = np.random.default_rng(2)
        cloud = as_cloud(sphere_samples(rng, 400, 0.05))
        fit = fit_superellipsoid(cloud)
        assert abs(fit.a - 0.05) <= 1e-3
        assert abs(fit.b - 0.05) <= 1e-3
        assert abs(fit.c - 0.05) <= 1e-3

    def test_rotated_ellipsoid_shortest_axis(self):
        rng = np.random.default_rng(3)
        angle = np.radians(30.0)
        rotation = np.array([
            [1, 0, 0],
            [0, np.cos(angle), -np.sin(angle)],
            [0, np.sin(angle), np.cos(angle)],
        ])
        cloud = as_cloud(ellipsoid_samples(rng, 500, (0.05, 0.04, 0.01), rotation))
        fit = fit_superellipsoid(cloud)
        pose = superellipsoid_pose(fit, np.zeros(3), rotation @ np.array([0, 0, 0.02]))
        expected = rotation @ np.array([0.0, 0.0, 1.0])
        assert angular_error(pose.direction, expected) <= 2.0

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match=">= 8"):
            fit_superellipsoid(as_cloud(np.zeros((5, 3))))

    def test_result_within_solver_box(self):
        rng = np.random.default_rng(4)
        cloud = as_cloud(ellipsoid_samples(rng, 300, (0.04, 0.03, 0.008)))
        fit = fit_superellipsoid(cloud)
        assert 0.0 <= min(fit.a, fit.b, fit.c) and max(fit.a, fit.b, fit.c) <= 0.1
        assert 0.9 <= fit.eps1 <= 1.1 and 0.9 <= fit.eps2 <= 1.1


class TestSuperellipsoidPose:
    def fit_with(self, a, b, c):
        return SuperellipsoidFit(a=a, b=b, c=c, eps1=1.0, eps2=1.0,
                                 angles=EulerAngles(0.0, 0.0, 0.0), residual_rms=0.0)

    def test_shortest_axis_toward_pistil(self):
        pose = superellipsoid_pose(self.fit_with(0.05, 0.04, 0.01),
                                   np.zeros(3), np.array([0, 0, 0.01]))
        assert np.allclose(pose.direction, [0, 0, 1])

    def test_sign_flips_with_pistil(self):
        pose = superellipsoid_pose(self.fit_with(0.05, 0.04, 0.01),
                                   np.zeros(3), np.array([0, 0, -0.01]))
        assert np.allclose(pose.direction, [0, 0, -1])

    def test_exact_tie_prefers_c_axis_and_flags(self):
        pose = superellipsoid_pose(self.fit_with(0.03, 0.03, 0.03),
                                   np.zeros(3), np.array([0, 0, 0.01]))
        assert np.allclose(pose.direction, [0, 0, 1])
        assert "axis_tie" in pose.flags

    def test_b_beats_a_on_pairwise_tie(self):
        pose = superellipsoid_pose(self.fit_with(0.02, 0.02, 0.05),
                                   np.zeros(3), np.array([0, 0.01, 0]))
        assert np.allclose(pose.direction, [0, 1, 0])
        assert "axis_tie" in pose.flags

    def test_missing_pistil_falls_back_to_up(self):
        fit = SuperellipsoidFit(a=0.05, b=0.04, c=0.01, eps1=1.0, eps2=1.0,
                                angles=EulerAngles(0.0, 0.0, np.pi), residual_rms=0.0)
        pose = superellipsoid_pose(fit, np.zeros(3), None)
        assert pose.direction[2] > 0
        assert "no_pistil_fallback" in pose.flags


class TestParaboloid:
    def test_upright_recovery(self):
        rng = np.random.default_rng(5)
        points = paraboloid_samples(rng, 400, 0.25, 0.25, 0.02)
        points -= points.mean(axis=0)
        estimate = fit_paraboloid(as_cloud(points))
        assert angular_error(estimate.direction, np.array([0, 0, 1.0])) <= 1.0

    def test_rotated_recovery(self):
        rng = np.random.default_rng(6)
        angle = np.radians(45.0)
        rotation = np.array([
            [np.cos(angle), 0, np.sin(angle)],
            [0, 1, 0],
            [-np.sin(angle), 0, np.cos(angle)],
        ])
        points = paraboloid_samples(rng, 400, 0.25, 0.25, 0.02, rotation)
        points -= points.mean(axis=0)
        expected = rotation @ np.array([0, 0, 1.0])
        estimate = fit_paraboloid(as_cloud(points),
                                  pistil_centroid=expected * 0.01,
                                  flower_centroid=np.zeros(3))
        assert angular_error(estimate.direction, expected) <= 1.0

    def test_downward_cup_failure_mode(self):
        # petals drooping away from the pistil: the best paraboloid opens
        # downward and the directional estimate lands ~180 degrees off
        rng = np.random.default_rng(7)
        xy = rng.uniform(-0.02, 0.02, (400, 2))
        z = -((xy[:, 0] / 0.15) ** 2 + (xy[:, 1] / 0.15) ** 2)
        points = np.column_stack([xy, z]) + rng.normal(0, 0.0005, (400, 3))
        points -= points.mean(axis=0)
        estimate = fit_paraboloid(as_cloud(points),
                                  pistil_centroid=np.array([0, 0, 0.01]),
                                  flower_centroid=np.zeros(3))
        assert angular_error(estimate.direction, np.array([0, 0, 1.0])) >= 150.0

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match=">= 5"):
            fit_paraboloid(as_cloud(np.zeros((4, 3))))


class TestPlane:
    def test_exact_plane_with_pistil_above(self):
        rng = np.random.default_rng(8)
        xy = rng.uniform(-0.02, 0.02, (100, 2))
        points = np.column_stack([xy, np.zeros(100)])
        estimate = fit_plane(as_cloud(points), np.zeros(3), np.array([0, 0, 0.01]))
        assert np.allclose(estimate.direction, [0, 0, 1])
        assert estimate.diagnostics.eigenvalues[0] <= 1e-18

    def test_tilted_noisy_plane(self):
        rng = np.random.default_rng(9)
        angle = np.radians(20.0)
        rotation = np.array([
            [1, 0, 0],
            [0, np.cos(angle), -np.sin(angle)],
            [0, np.sin(angle), np.cos(angle)],
        ])
        xy = rng.uniform(-0.025, 0.025, (300, 2))
        points = np.column_stack([xy, np.zeros(300)]) @ rotation.T
        points += rng.normal(0, 0.001, points.shape)
        expected = rotation @ np.array([0, 0, 1.0])
        estimate = fit_plane(as_cloud(points), np.zeros(3), expected * 0.01)
        assert angular_error(estimate.direction, expected) <= 2.0

    def test_collinear_points_rejected(self):
        points = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometryError):
            fit_plane(as_cloud(points), np.zeros(3), None)

    def test_eigenvalues_sorted_non_negative(self):
        rng = np.random.default_rng(10)
        points = rng.normal(0, 0.01, (50, 3))
        estimate = fit_plane(as_cloud(points), np.zeros(3), None)
        ev = estimate.diagnostics.eigenvalues
        assert (np.diff(ev) >= 0).all() and (ev >= 0).all()


class TestAngularError:
    def test_identity(self):
        v = np.array([0.6, 0.8, 0.0])
        assert angular_error(v, v) == 0.0

    def test_antipodal(self):
        v = np.array([0.0, 0.0, 1.0])
        assert angular_error(v, -v) == pytest.approx(180.0)

    def test_orthogonal(self):
        assert angular_error(np.array([1.0, 0, 0]),
                             np.array([0, 1.0, 0])) == pytest.approx(90.0)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            angular_error(np.array([1.0, 1.0, 0.0]), np.array([1.0, 0, 0]))


class TestJacobians:
    def test_superellipsoid_matches_central_differences(self):
        rng = np.random.default_rng(11)
        points = ellipsoid_samples(rng, 30, (0.05, 0.04, 0.02))
        for _ in range(10):
            params = np.concatenate([
                rng.uniform(0.01, 0.09, 3), rng.uniform(0.92, 1.08, 2),
                rng.uniform(-2.5, 2.5, 3),
            ])
            analytic = superellipsoid_jacobian(params, points)
            numeric = finite_difference_jacobian(
                lambda p: superellipsoid_residual(p, points), params, step=1e-6)
            scale = 1.0 + np.abs(numeric)
            assert (np.abs(analytic - numeric) / scale).max() <= 1e-5

    def test_paraboloid_matches_central_differences(self):
        rng = np.random.default_rng(12)
        points = paraboloid_samples(rng, 30, 0.05, 0.04, 0.015)
        for _ in range(10):
            params = np.concatenate([
                rng.uniform(0.02, 0.09, 2), rng.uniform(-2.5, 2.5, 3),
            ])
            analytic = paraboloid_jacobian(params, points)
            numeric = finite_difference_jacobian(
                lambda p: paraboloid_residual(p, points), params, step=1e-6)
            scale = 1.0 + np.abs(numeric)
            assert (np.abs(analytic - numeric) / scale).max() <= 1e-5


class TestRotationProperties:
    def test_euler_roundtrip(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            rotation = random_rotation(rng)
            angles = euler_from_matrix(rotation)
            assert np.abs(rotation_matrix(angles) - rotation).max() <= 1e-10

    def flower_points(self, rng):
        xy_radius = 0.02 * np.sqrt(rng.uniform(0, 1, 300))
        angle = rng.uniform(0, 2 * np.pi, 300)
        x = xy_radius * np.cos(angle)
        y = xy_radius * np.sin(angle)
        z = 0.4 * (x ** 2 + y ** 2) / 0.02
        return np.column_stack([x, y, z])

    def test_all_methods_rotation_equivariant(self):
        rng = np.random.default_rng(14)
        base = self.flower_points(rng)
        base -= base.mean(axis=0)
        pistil = np.array([0.0, 0.0, 0.012])

        def estimates(points, pistil_centroid):
            cloud = as_cloud(points - points.mean(axis=0))
            se = superellipsoid_pose(fit_superellipsoid(cloud), np.zeros(3),
                                     pistil_centroid)
            par = fit_paraboloid(cloud, pistil_centroid, np.zeros(3))
            pla = fit_plane(cloud, np.zeros(3), pistil_centroid)
            return {"superellipsoid": se.direction, "paraboloid": par.direction,
                    "plane": pla.direction}

        reference = estimates(base, pistil)
        for trial in range(5):
            rotation = random_rotation(rng)
            rotated = estimates(base @ rotation.T, rotation @ pistil)
            for method, direction in rotated.items():
                expected = rotation @ reference[method]
                assert angular_error(direction, expected) <= 1.0, (trial, method)

    def test_plane_rotation_equivariance_is_tight(self):
        rng = np.random.default_rng(15)
        xy = rng.uniform(-0.02, 0.02, (200, 2))
        base = np.column_stack([xy, np.zeros(200)])
        reference = fit_plane(as_cloud(base), np.zeros(3),
                              np.array([0, 0, 0.01])).direction
        for _ in range(5):
            rotation = random_rotation(rng)
            rotated = fit_plane(as_cloud(base @ rotation.T), np.zeros(3),
                                rotation @ np.array([0, 0, 0.01])).direction
            assert angular_error(rotated, rotation @ reference) <= 1e-6

    def test_plane_scale_invariance(self):
        rng = np.random.default_rng(16)
        xy = rng.uniform(-0.02, 0.02, (200, 2))
        tilt = euler_from_matrix(random_rotation(rng))
        rotation = rotation_matrix(tilt)
        base = np.column_stack([xy, np.zeros(200)]) @ rotation.T
        pistil = rotation @ np.array([0, 0, 0.01])
        reference = fit_plane(as_cloud(base), np.zeros(3), pistil).direction
        for scale in (0.5, 2.0):
            scaled = fit_plane(as_cloud(base * scale), np.zeros(3), pistil).direction
            assert angular_error(scaled, reference) <= 1e-6

    def test_pistil_negation_flips_sign_exactly(self):
        rng = np.random.default_rng(17)
        points = self.flower_points(rng)
        points -= points.mean(axis=0)
        cloud = as_cloud(points)
        pistil = np.array([0.001, -0.002, 0.012])
        se_fit = fit_superellipsoid(cloud)
        up = superellipsoid_pose(se_fit, np.zeros(3), pistil)
        down = superellipsoid_pose(se_fit, np.zeros(3), -pistil)
        assert np.array_equal(up.direction, -down.direction)
        plane_up = fit_plane(cloud, np.zeros(3), pistil)
        plane_down = fit_plane(cloud, np.zeros(3), -pistil)
        assert np.array_equal(plane_up.direction, -plane_down.direction)

    def test_directions_are_unit(self):
        rng = np.random.default_rng(18)
        points = self.flower_points(rng)
        points -= points.mean(axis=0)
        cloud = as_cloud(points)
        pistil = np.array([0, 0, 0.012])
        directions = [
            superellipsoid_pose(fit_superellipsoid(cloud), np.zeros(3), pistil).direction,
            fit_paraboloid(cloud, pistil, np.zeros(3)).direction,
            fit_plane(cloud, np.zeros(3), pistil).direction,
        ]
        for direction in directions:
            assert abs(np.linalg.norm(direction) - 1.0) <= 1e-9
