"""Flower orientation from surface fits to the centered petal cloud.

Three models are fit: a bounded superellipsoid (trust-region reflective), an
unconstrained paraboloid (Levenberg-Marquardt), and a PCA plane. Each yields
a unit direction; the superellipsoid and plane are sign-ambiguous and use the
pistil to disambiguate, the paraboloid is directional by construction.

Euler convention: intrinsic Z-Y-X, R = Rz(phi) @ Ry(theta) @ Rx(psi),
mapping local coordinates to world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

from .cloud import PointCloud

AXIS_BOUND_M = 0.1          # semi-axes capped at real-flower scale
EXPONENT_BOUNDS = (0.9, 1.1)
_AXIS_FLOOR = 1e-6          # keeps 1/axis finite at the lower bound

SUPERELLIPSOID = "superellipsoid"
PARABOLOID = "paraboloid"
PLANE = "plane"
METHODS = (SUPERELLIPSOID, PARABOLOID, PLANE)


class SolverDivergenceError(RuntimeError):
    """Damping overflowed without a usable step; carries the best point seen."""

    def __init__(self, message: str, best_params: np.ndarray, best_norm: float):
        super().__init__(message)
        self.best_params = best_params
        self.best_norm = best_norm


class DegenerateGeometryError(ValueError):
    """The point set has no well-defined fit (e.g. collinear points)."""


@dataclass(frozen=True)
class EulerAngles:
    phi: float
    theta: float
    psi: float

    def __post_init__(self) -> None:
        if not np.isfinite([self.phi, self.theta, self.psi]).all():
            raise ValueError("Euler angles must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.theta, self.psi])


def rotation_matrix(angles: EulerAngles | np.ndarray) -> np.ndarray:
    """Local-to-world rotation for intrinsic Z-Y-X Euler angles."""
    if isinstance(angles, EulerAngles):
        phi, theta, psi = angles.phi, angles.theta, angles.psi
    else:
        phi, theta, psi = angles
    cz, sz = np.cos(phi), np.sin(phi)
    cy, sy = np.cos(theta), np.sin(theta)
    cx, sx = np.cos(psi), np.sin(psi)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def _rotation_derivatives(angles: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rotation matrix and its three partial derivatives."""
    phi, theta, psi = angles
    cz, sz = np.cos(phi), np.sin(phi)
    cy, sy = np.cos(theta), np.sin(theta)
    cx, sx = np.cos(psi), np.sin(psi)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    return rz @ ry @ rx, [drz @ ry @ rx, rz @ dry @ rx, rz @ ry @ drx]


def euler_from_matrix(rotation: np.ndarray) -> EulerAngles:
    """Inverse of rotation_matrix; theta confined to [-pi/2, pi/2]."""
    r20 = float(np.clip(rotation[2, 0], -1.0, 1.0))
    theta = float(np.arcsin(-r20))
    if abs(r20) < 1.0 - 1e-12:
        phi = float(np.arctan2(rotation[1, 0], rotation[0, 0]))
        psi = float(np.arctan2(rotation[2, 1], rotation[2, 2]))
    else:  # gimbal lock: only phi +/- psi is determined; pin psi
        phi = float(np.arctan2(-rotation[0, 1], rotation[1, 1]))
        psi = 0.0
    return EulerAngles(phi, theta, psi)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolveResult:
    params: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


def finite_difference_jacobian(residual: Callable[[np.ndarray], np.ndarray],
                               x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, one column per parameter."""
    x = np.asarray(x, dtype=np.float64)
    r0 = np.atleast_1d(residual(x))
    jac = np.empty((len(r0), len(x)))
    for i in range(len(x)):
        h = step * max(1.0, abs(x[i]))
        forward, backward = x.copy(), x.copy()
        forward[i] += h
        backward[i] -= h
        jac[:, i] = (np.atleast_1d(residual(forward))
                     - np.atleast_1d(residual(backward))) / (2.0 * h)
    return jac


_LAMBDA_MAX = 1e15


def lm_solve(residual: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
             jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
             tol: float = 1e-10, max_iter: int = 200) -> SolveResult:
    """Levenberg-Marquardt over an unconstrained residual vector.

    Only improving steps are accepted, so the returned squared-residual norm
    never exceeds the initializer's. Terminates when the gradient's infinity
    norm or the relative step falls below tol, or after max_iter iterations.

    Raises:
        ValueError: residual is not finite at x0.
        SolverDivergenceError: damping overflows while the residual keeps
            evaluating non-finite; carries the best parameters found.
    """
    x = np.array(x0, dtype=np.float64)
    r = np.atleast_1d(np.asarray(residual(x), dtype=np.float64))
    if not np.isfinite(r).all():
        raise ValueError("residual is not finite at the initial point")
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    steps_taken = 0
    for _ in range(max_iter):
        jac = jacobian(x) if jacobian is not None else finite_difference_jacobian(residual, x)
        jac = np.atleast_2d(np.asarray(jac, dtype=np.float64))
        grad = jac.T @ r
        if np.abs(grad).max() < tol:
            converged = True
            break
        jtj = jac.T @ jac
        scale = np.clip(np.diag(jtj), 1e-12, None)

        step = None
        saw_nonfinite = False
        while lam <= _LAMBDA_MAX:
            try:
                trial = np.linalg.solve(jtj + lam * np.diag(scale), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.isfinite(trial).all():
                lam *= 10.0
                continue
            x_new = x + trial
            r_new = np.atleast_1d(np.asarray(residual(x_new), dtype=np.float64))
            if not np.isfinite(r_new).all():
                saw_nonfinite = True
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                step = trial
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam * 0.1, 1e-12)
                break
            lam *= 10.0
        if step is None:
            if saw_nonfinite:
                raise SolverDivergenceError(
                    "damping overflow: residual non-finite along every trial step",
                    best_params=x, best_norm=float(np.sqrt(cost)))
            break  # no improving step exists at damping cap: numerically stationary
        steps_taken += 1
        if np.linalg.norm(step) < tol * (np.linalg.norm(x) + tol):
            converged = True
            break
    return SolveResult(params=x, residual_norm=float(np.sqrt(cost)),
                       iterations=steps_taken, converged=converged)


def trf_solve(residual: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
              lower: np.ndarray, upper: np.ndarray, tol: float = 1e-10,
              max_iter: int = 200,
              jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> SolveResult:
    """Bound-constrained least squares via the trust-region reflective method.

    Thin wrapper over scipy's solver; the iterate stays within [lower, upper]
    and the final cost never exceeds the cost at x0.

    Raises:
        ValueError: x0 outside the bounds.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if (x0 < lower).any() or (x0 > upper).any():
        raise ValueError("x0 is infeasible: outside [lower, upper]")
    result = least_squares(
        residual, x0, jac=jacobian if jacobian is not None else "2-point",
        bounds=(lower, upper), method="trf",
        xtol=tol, ftol=tol, gtol=tol,
        max_nfev=max_iter * (len(x0) + 1),
    )
    return SolveResult(params=result.x, residual_norm=float(np.linalg.norm(result.fun)),
                       iterations=int(result.nfev), converged=bool(result.status > 0))


# ---------------------------------------------------------------------------
# Surface models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperellipsoidFit:
    a: float
    b: float
    c: float
    eps1: float
    eps2: float
    angles: EulerAngles
    residual_rms: float

    def __post_init__(self) -> None:
        semi = (self.a, self.b, self.c)
        if not all(np.isfinite(s) and s >= 0.0 for s in semi):
            raise ValueError(f"semi-axes {semi} must be finite and non-negative")
        if self.eps1 <= 0.0 or self.eps2 <= 0.0:
            raise ValueError(f"exponents ({self.eps1}, {self.eps2}) must be positive")


@dataclass(frozen=True)
class ParaboloidFit:
    a: float
    b: float
    angles: EulerAngles
    residual_rms: float

    def __post_init__(self) -> None:
        if self.a == 0.0 or self.b == 0.0:
            raise ValueError("paraboloid curvature scales must be nonzero")


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self) -> None:
        normal = np.asarray(self.normal, dtype=np.float64)
        eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        if (np.diff(eigenvalues) < 0).any() or (eigenvalues < 0).any():
            raise ValueError("eigenvalues must be non-negative and ascending")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "eigenvalues", eigenvalues)


@dataclass(frozen=True)
class PoseEstimate:
    """Unit flower direction plus the fit that produced it."""

    direction: np.ndarray
    method: str
    diagnostics: object
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction norm {norm} is not 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "direction", direction / norm)


def _superellipsoid_terms(params: np.ndarray, points: np.ndarray):
    a, b, c, e1, e2 = params[:5]
    a, b, c = max(a, _AXIS_FLOOR), max(b, _AXIS_FLOOR), max(c, _AXIS_FLOOR)
    rot, drot = _rotation_derivatives(params[5:])
    q = points @ rot
    t1 = np.maximum(np.abs(q[:, 0]) / a, 1e-12)
    t2 = np.maximum(np.abs(q[:, 1]) / b, 1e-12)
    t3 = np.maximum(np.abs(q[:, 2]) / c, 1e-12)
    u = t1 ** (2.0 / e2)
    v = t2 ** (2.0 / e2)
    w = u + v
    g = w ** (e2 / e1)
    h = t3 ** (2.0 / e1)
    return (a, b, c, e1, e2), rot, drot, q, (t1, t2, t3), (u, v, w, g, h)


def superellipsoid_residual(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Inside-outside function minus one, per point.

    The implicit surface is
    ``((|x|/a)^(2/e2) + (|y|/b)^(2/e2))^(e2/e1) + (|z|/c)^(2/e1) = 1`` in the
    body frame; points are taken to the body frame by the inverse rotation.
    """
    *_, (u, v, w, g, h) = _superellipsoid_terms(params, points)
    return g + h - 1.0


def superellipsoid_jacobian(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of superellipsoid_residual (n x 8)."""
    (a, b, c, e1, e2), _, drot, q, (t1, t2, t3), (u, v, w, g, h) = \
        _superellipsoid_terms(params, points)
    gw = (e2 / e1) * w ** (e2 / e1 - 1.0)
    jac = np.empty((len(points), 8))
    jac[:, 0] = gw * (-2.0 * u / (e2 * a))
    jac[:, 1] = gw * (-2.0 * v / (e2 * b))
    jac[:, 2] = -2.0 * h / (e1 * c)
    log_w, log_t1, log_t2, log_t3 = np.log(w), np.log(t1), np.log(t2), np.log(t3)
    jac[:, 3] = -(e2 / e1 ** 2) * g * log_w - (2.0 / e1 ** 2) * h * log_t3
    jac[:, 4] = g * log_w / e1 + gw * (
        u * log_t1 * (-2.0 / e2 ** 2) + v * log_t2 * (-2.0 / e2 ** 2))
    df_dq = np.stack([
        gw * (2.0 / (e2 * a)) * t1 ** (2.0 / e2 - 1.0) * np.sign(q[:, 0]),
        gw * (2.0 / (e2 * b)) * t2 ** (2.0 / e2 - 1.0) * np.sign(q[:, 1]),
        (2.0 / (e1 * c)) * t3 ** (2.0 / e1 - 1.0) * np.sign(q[:, 2]),
    ], axis=1)
    for k, dr in enumerate(drot):
        jac[:, 5 + k] = np.einsum("ij,ij->i", df_dq, points @ dr)
    return jac


def paraboloid_residual(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """z' - ((x'/a)^2 + (y'/b)^2) in the body frame, vertex at the origin."""
    a, b = params[:2]
    rot = rotation_matrix(params[2:])
    q = points @ rot
    return q[:, 2] - (q[:, 0] / a) ** 2 - (q[:, 1] / b) ** 2


def paraboloid_jacobian(params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of paraboloid_residual (n x 5)."""
    a, b = params[:2]
    rot, drot = _rotation_derivatives(params[2:])
    q = points @ rot
    jac = np.empty((len(points), 5))
    jac[:, 0] = 2.0 * q[:, 0] ** 2 / a ** 3
    jac[:, 1] = 2.0 * q[:, 1] ** 2 / b ** 3
    dr_dq = np.stack([-2.0 * q[:, 0] / a ** 2, -2.0 * q[:, 1] / b ** 2,
                      np.ones(len(points))], axis=1)
    for k, dr in enumerate(drot):
        jac[:, 2 + k] = np.einsum("ij,ij->i", dr_dq, points @ dr)
    return jac


def _pca_frame(points: np.ndarray, toward: Optional[np.ndarray] = None) -> np.ndarray:
    """Right-handed frame from principal axes; local z = least variance.

    When ``toward`` is given, the local +z axis is flipped to have a
    non-negative dot product with it (x flips too, preserving handedness).
    """
    centered = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    frame = np.column_stack([vecs[:, 2], vecs[:, 1], vecs[:, 0]])
    if np.linalg.det(frame) < 0:
        frame[:, 1] *= -1.0
    if toward is not None and frame[:, 2] @ toward < 0:
        frame[:, 0] *= -1.0
        frame[:, 2] *= -1.0
    return frame


def _oriented(axis: np.ndarray, flower_centroid: Optional[np.ndarray],
              pistil_centroid: Optional[np.ndarray]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Signs an axis toward the pistil, falling back to world +Z."""
    if pistil_centroid is not None and flower_centroid is not None:
        toward = np.asarray(pistil_centroid) - np.asarray(flower_centroid)
        dot = float(axis @ toward)
        if dot > 0:
            return axis, ()
        if dot < 0:
            return -axis, ()
    flags = ("no_pistil_fallback",)
    return (-axis if axis[2] < 0 else axis), flags


def fit_superellipsoid(petals: PointCloud, tol: float = 1e-10, max_iter: int = 200,
                       axis_bound: float = AXIS_BOUND_M,
                       exponent_bounds: tuple[float, float] = EXPONENT_BOUNDS
                       ) -> SuperellipsoidFit:
    """Bounded superellipsoid fit to a petal cloud centered at the origin.

    Initialization: principal axes give the starting rotation; semi-axes
    start at sqrt(3) times the per-axis standard deviation (clamped into the
    box); both exponents start at 1.

    Raises:
        ValueError: fewer than 8 points (the model has 8 parameters).
    """
    if len(petals) < 8:
        raise ValueError(f"superellipsoid fit needs >= 8 points, got {len(petals)}")
    points = petals.positions
    frame = _pca_frame(points)
    # Optimize in the principal frame: points are pre-rotated and the angle
    # parameters start at zero, far from the Euler parameterization's gimbal
    # singularities; the world rotation is composed afterwards. This keeps
    # the whole fit equivariant under rigid rotations of the input.
    local = points @ frame
    semi0 = np.clip(local.std(axis=0) * np.sqrt(3.0), 1e-4, axis_bound)
    lo, hi = exponent_bounds
    eps0 = min(max(1.0, lo), hi)
    x0 = np.concatenate([semi0, [eps0, eps0], np.zeros(3)])
    lower = np.array([_AXIS_FLOOR] * 3 + [lo, lo] + [-np.pi] * 3)
    upper = np.array([axis_bound] * 3 + [hi, hi] + [np.pi] * 3)
    result = trf_solve(lambda p: superellipsoid_residual(p, local), x0, lower, upper,
                       tol=tol, max_iter=max_iter,
                       jacobian=lambda p: superellipsoid_jacobian(p, local))
    a, b, c, e1, e2 = result.params[:5]
    world_rotation = frame @ rotation_matrix(result.params[5:])
    return SuperellipsoidFit(a=a, b=b, c=c, eps1=e1, eps2=e2,
                             angles=euler_from_matrix(world_rotation),
                             residual_rms=result.residual_norm / np.sqrt(len(petals)))


def superellipsoid_pose(fit: SuperellipsoidFit, flower_centroid: np.ndarray,
                        pistil_centroid: Optional[np.ndarray] = None) -> PoseEstimate:
    """Direction of the superellipsoid's shortest axis, signed by the pistil.

    Exact ties among the semi-axes resolve in the order c, b, a and set an
    ``axis_tie`` flag.
    """
    semi = np.array([fit.a, fit.b, fit.c])
    if fit.c <= fit.a and fit.c <= fit.b:
        shortest = 2
    elif fit.b <= fit.a:
        shortest = 1
    else:
        shortest = 0
    flags: tuple[str, ...] = ()
    if (semi == semi[shortest]).sum() > 1:
        flags += ("axis_tie",)
    axis = rotation_matrix(fit.angles)[:, shortest]
    direction, orient_flags = _oriented(axis, flower_centroid, pistil_centroid)
    return PoseEstimate(direction=direction, method=SUPERELLIPSOID,
                        diagnostics=fit, flags=flags + orient_flags)


def fit_paraboloid(petals: PointCloud, pistil_centroid: Optional[np.ndarray] = None,
                   flower_centroid: Optional[np.ndarray] = None, tol: float = 1e-10,
                   max_iter: int = 200, init_scale: float = 0.05) -> PoseEstimate:
    """Paraboloid fit to a centered petal cloud; pose is the local +z axis.

    The model is directional, so no pistil disambiguation is applied. The
    solver is started from each principal axis in both signs (pistil-ward
    sign first, as the tie-break) and the lowest-cost fit wins, which makes
    the selected orientation a property of the residual landscape alone and
    hence rotation-equivariant. A genuinely downward-cupped flower still
    converges to an opening-downward surface, reproducing the documented
    near-180-degree failure mode.

    Raises:
        ValueError: fewer than 5 points.
    """
    if len(petals) < 5:
        raise ValueError(f"paraboloid fit needs >= 5 points, got {len(petals)}")
    points = petals.positions
    if pistil_centroid is not None and flower_centroid is not None:
        toward = np.asarray(pistil_centroid) - np.asarray(flower_centroid)
    else:
        toward = np.array([0.0, 0.0, 1.0])
    frame = _pca_frame(points, toward=toward)

    # Each start optimizes in its own frame (pre-rotated points, angles from
    # zero) to stay clear of Euler gimbal singularities; the world rotation
    # is composed afterwards, keeping every start rotation-equivariant.
    best: Optional[SolveResult] = None
    best_start: Optional[np.ndarray] = None
    for axis in (2, 1, 0):  # least-variance axis first
        for flip in (1.0, -1.0):
            z_axis = frame[:, axis]
            if z_axis @ toward < 0:
                z_axis = -z_axis
            z_axis = flip * z_axis
            x_axis = frame[:, (axis + 1) % 3]
            start = np.column_stack([x_axis, np.cross(z_axis, x_axis), z_axis])
            local = points @ start
            x0 = np.concatenate([[init_scale, init_scale], np.zeros(3)])
            result = lm_solve(lambda p: paraboloid_residual(p, local), x0,
                              jacobian=lambda p: paraboloid_jacobian(p, local),
                              tol=tol, max_iter=max_iter)
            if best is None or result.residual_norm < best.residual_norm:
                best = result
                best_start = start
    a, b = best.params[:2]
    world_rotation = best_start @ rotation_matrix(best.params[2:])
    angles = euler_from_matrix(world_rotation)
    fit = ParaboloidFit(a=a, b=b, angles=angles,
                        residual_rms=best.residual_norm / np.sqrt(len(petals)))
    return PoseEstimate(direction=world_rotation[:, 2], method=PARABOLOID,
                        diagnostics=fit)


def fit_plane(petals: PointCloud, flower_centroid: Optional[np.ndarray] = None,
              pistil_centroid: Optional[np.ndarray] = None) -> PoseEstimate:
    """PCA plane normal (smallest-eigenvalue eigenvector), signed by the pistil.

    Raises:
        ValueError: fewer than 3 points.
        DegenerateGeometryError: collinear points (rank-deficient covariance).
    """
    if len(petals) < 3:
        raise ValueError(f"plane fit needs >= 3 points, got {len(petals)}")
    centered = petals.positions - petals.positions.mean(axis=0)
    covariance = centered.T @ centered / len(petals)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    if eigenvalues[1] <= eigenvalues[2] * 1e-12:
        raise DegenerateGeometryError("points are collinear; plane normal undefined")
    direction, flags = _oriented(eigenvectors[:, 0], flower_centroid, pistil_centroid)
    fit = PlaneFit(normal=direction, eigenvalues=eigenvalues)
    return PoseEstimate(direction=direction, method=PLANE, diagnostics=fit, flags=flags)


def angular_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Angle between two unit vectors in degrees, in [0, 180].

    Raises:
        ValueError: either vector's norm is off unit by more than 1e-6.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    for name, vec in (("estimate", estimate), ("truth", truth)):
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not unit length (norm {np.linalg.norm(vec)})")
    return float(np.degrees(np.arccos(np.clip(estimate @ truth, -1.0, 1.0))))
