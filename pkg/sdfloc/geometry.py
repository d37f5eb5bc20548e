"""
SE(3)/se(3) Lie-group arithmetic and the pinhole camera model.

Conventions:
    - A Pose T = (R, t) maps points as p' = R p + t.
    - Keyframe poses are world-to-camera (T_cw); trajectories store camera-to-world.
    - Twists are ordered (rho, phi): translational part first, rotational part second.
    - Updates are left-multiplicative: xi (+) T = exp(xi^) T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from sdfloc.errors import AngleAtPi, BehindCamera

SMALL_ANGLE = 1e-6
DEPTH_EPSILON = 1e-6  # meters
RENORMALIZE_EVERY = 100
_NEAR_PI = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of v (or an (N,3,3) stack for (N,3) input)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) by polar decomposition (SVD)."""
    u, _, vt = np.linalg.svd(matrix)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        u[:, -1] *= -1
        rotation = u @ vt
    return rotation


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform in SE(3).

    Immutable: the arrays are read-only. ``compositions`` counts how many products
    produced this pose since the last re-orthonormalization.
    """
    rotation: np.ndarray
    translation: np.ndarray
    compositions: int = field(default=0, compare=False)

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float)
        translation = np.asarray(self.translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and a 3-vector translation")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        """Return self * other, re-orthonormalizing every RENORMALIZE_EVERY products."""
        rotation = self.rotation @ other.rotation
        translation = self.rotation @ other.translation + self.translation
        count = max(self.compositions, other.compositions) + 1
        product = Pose(rotation, translation, count)
        return product.renormalized() if count >= RENORMALIZE_EVERY else product

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.compositions)

    def renormalized(self) -> "Pose":
        """Same pose with the rotation projected back onto SO(3) and the count reset."""
        return Pose(nearest_rotation(self.rotation), self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N,3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """-R^T t: the camera center in world coordinates for a world-to-camera pose."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class Twist:
    """se(3) tangent vector: rho (meters) and phi (radians)."""
    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _frozen(np.asarray(self.rho, dtype=float).reshape(3)))
        object.__setattr__(self, "phi", _frozen(np.asarray(self.phi, dtype=float).reshape(3)))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "Twist":
        vector = np.asarray(vector, dtype=float).reshape(6)
        return cls(vector[:3], vector[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


TwistLike = Union[Twist, np.ndarray]


def _as_twist(xi: TwistLike) -> Twist:
    return xi if isinstance(xi, Twist) else Twist.from_vector(xi)


def _so3_terms(theta: float):
    """Return (A, B, C) = (sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3)."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (
        np.sin(theta) / theta,
        (1.0 - np.cos(theta)) / theta ** 2,
        (theta - np.sin(theta)) / theta ** 3,
    )


def exp_twist(xi: TwistLike) -> Pose:
    """
    Exponential map se(3) -> SE(3).

    Args:
        xi: Twist or 6-vector (rho, phi)

    Returns:
        exp(xi^) as a Pose
    """
    xi = _as_twist(xi)
    phi = xi.phi
    theta = float(np.linalg.norm(phi))
    a, b, c = _so3_terms(theta)
    phi_hat = skew(phi)
    phi_hat2 = phi_hat @ phi_hat
    rotation = np.eye(3) + a * phi_hat + b * phi_hat2
    v = np.eye(3) + b * phi_hat + c * phi_hat2
    return Pose(rotation, v @ xi.rho)


def apply_twist(xi: TwistLike, pose: Pose) -> Pose:
    """Left-multiplicative update xi (+) T = exp(xi^) * T."""
    return exp_twist(xi).compose(pose)


def _log_rotation(rotation: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    w = 0.5 * np.array([
        rotation[2, 1] - rotation[1, 2],
        rotation[0, 2] - rotation[2, 0],
        rotation[1, 0] - rotation[0, 1],
    ])
    sin_theta = float(np.linalg.norm(w))
    theta = float(np.arctan2(sin_theta, cos_theta))

    if np.pi - theta < _NEAR_PI:
        raise AngleAtPi(f"rotation angle {theta!r} is within {_NEAR_PI} of pi")
    if theta < SMALL_ANGLE:
        # w = sin(theta) * axis ~ theta * axis, error O(theta^3)
        return w * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 0.1:
        return theta * w / sin_theta

    # Near pi the antisymmetric part is small; take the axis from the symmetric part.
    sym = (rotation + rotation.T) / 2.0 - cos_theta * np.eye(3)
    column = int(np.argmax(np.diag(sym)))
    axis = sym[:, column] / np.sqrt(sym[column, column] * (1.0 - cos_theta))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def log_pose(pose: Pose) -> Twist:
    """
    Logarithm SE(3) -> se(3).

    Raises:
        AngleAtPi: If the rotation angle is within 1e-9 of pi
    """
    phi = _log_rotation(pose.rotation)
    theta = float(np.linalg.norm(phi))
    phi_hat = skew(phi)
    if theta < SMALL_ANGLE:
        v_inv = np.eye(3) - 0.5 * phi_hat + phi_hat @ phi_hat / 12.0
    else:
        a, b, _ = _so3_terms(theta)
        v_inv = np.eye(3) - 0.5 * phi_hat + (1.0 - a / (2.0 * b)) / theta ** 2 * (phi_hat @ phi_hat)
    return Twist(v_inv @ pose.translation, phi)


def transform_point(pose: Pose, point: np.ndarray) -> np.ndarray:
    """p' = R p + t for a 3-vector or an (N,3) array."""
    return pose.transform(point)


def pose_point_jacobian(pose: Pose, point: np.ndarray) -> np.ndarray:
    """
    Derivative of exp(xi) * (T p) with respect to xi at xi = 0.

    Returns [I | -(T p)^] in (rho, phi) ordering: 3x6, or (N,3,6) for (N,3) points.
    """
    moved = pose.transform(point)
    return pose_point_jacobian_at(moved)


def pose_point_jacobian_at(moved: np.ndarray) -> np.ndarray:
    """[I | -p^] for already transformed points p (3-vector or (N,3))."""
    moved = np.asarray(moved, dtype=float)
    out = np.zeros(moved.shape[:-1] + (3, 6))
    out[..., :, :3] = np.eye(3)
    out[..., :, 3:] = -skew(moved)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics without distortion."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def bearing(self, u: float, v: float) -> np.ndarray:
        """Unit ray direction in the camera frame through pixel (u, v)."""
        ray = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return ray / np.linalg.norm(ray)

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= 0) & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
        )


@dataclass(frozen=True)
class Pixel:
    """Image measurement at a pyramid level (coordinates are level-0 pixels)."""
    u: float
    v: float
    level: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("pyramid level must be >= 0")

    def vector(self) -> np.ndarray:
        return np.array([self.u, self.v])


def project(camera: CameraIntrinsics, p_cam: np.ndarray) -> Pixel:
    """
    Pinhole projection u = fx x/z + cx, v = fy y/z + cy.

    Raises:
        BehindCamera: If z <= DEPTH_EPSILON
    """
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= DEPTH_EPSILON:
        raise BehindCamera(f"point depth {z!r} is not in front of the camera")
    return Pixel(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy)


def project_jacobian(camera: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """
    Analytic 2x3 Jacobian of project with respect to the camera-frame point.

    Raises:
        BehindCamera: If z <= DEPTH_EPSILON
    """
    p_cam = np.asarray(p_cam, dtype=float)
    if p_cam[2] <= DEPTH_EPSILON:
        raise BehindCamera(f"point depth {p_cam[2]!r} is not in front of the camera")
    return project_jacobians(camera, p_cam[None, :])[0]


def project_points(camera: CameraIntrinsics, points: np.ndarray):
    """
    Vectorized projection of (N,3) camera-frame points.

    Returns:
        (uv (N,2), valid mask (N,)); invalid rows hold NaN
    """
    points = np.asarray(points, dtype=float)
    z = points[:, 2]
    valid = z > DEPTH_EPSILON
    safe_z = np.where(valid, z, np.nan)
    uv = np.stack([
        camera.fx * points[:, 0] / safe_z + camera.cx,
        camera.fy * points[:, 1] / safe_z + camera.cy,
    ], axis=1)
    return uv, valid


def project_jacobians(camera: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """(N,2,3) projection Jacobians; rows for points behind the camera are NaN."""
    points = np.asarray(points, dtype=float)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    inv_z = np.where(z > DEPTH_EPSILON, 1.0 / np.where(z == 0, 1.0, z), np.nan)
    out = np.zeros((len(points), 2, 3))
    out[:, 0, 0] = camera.fx * inv_z
    out[:, 0, 2] = -camera.fx * x * inv_z ** 2
    out[:, 1, 1] = camera.fy * inv_z
    out[:, 1, 2] = -camera.fy * y * inv_z ** 2
    return out


def rotation_angle(rotation: np.ndarray) -> float:
    """Angle (radians) of a rotation matrix."""
    cos_theta = np.clip((np.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    w = 0.5 * np.array([
        rotation[2, 1] - rotation[1, 2],
        rotation[0, 2] - rotation[2, 0],
        rotation[1, 0] - rotation[0, 1],
    ])
    return float(np.arctan2(np.linalg.norm(w), cos_theta))
