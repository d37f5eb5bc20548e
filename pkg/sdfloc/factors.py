"""
Residual blocks for the two factor types, their robust loss and analytic Jacobians.

Residuals are whitened by sqrt(weight) before the Huber loss is applied:

    SDF:           e = sqrt(w_sdf) * phi(T p)
    reprojection:  e = sqrt(w_repro) * ||u - pi(T p)||

Pose Jacobians are taken with respect to a left twist update exp(xi) * T, (rho, phi) order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from sdfloc.geometry import (
    CameraIntrinsics,
    Pixel,
    Pose,
    pose_point_jacobian_at,
    project,
    project_jacobians,
    project_points,
)
from sdfloc.sdf_map import SdfMap

DEFAULT_HUBER_DELTA = 1.345


@dataclass
class SdfFactor:
    """Distance of a landmark to the prior map surface. Inactive factors contribute nothing."""
    landmark_id: int
    weight: float
    active: bool = True

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("SDF factor weight must be positive")


@dataclass
class ReprojectionFactor:
    """Observation of a landmark in a keyframe; sigma is 2^level pixels."""
    landmark_id: int
    keyframe_id: int
    pixel: Pixel
    active: bool = True

    @property
    def level(self) -> int:
        return self.pixel.level

    @property
    def weight(self) -> float:
        return 1.0 / 4.0 ** self.pixel.level


@dataclass(frozen=True)
class RobustLoss:
    """Huber loss on whitened residuals: quadratic below delta, linear above."""
    delta: float = DEFAULT_HUBER_DELTA

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("Huber delta must be positive")

    def weight(self, whitened_norm):
        """IRLS attenuation rho'(e^2): 1 below delta, delta/e above."""
        e = np.asarray(whitened_norm, dtype=float)
        return np.where(e <= self.delta, 1.0, self.delta / np.maximum(e, self.delta))

    def cost(self, squared):
        """rho(s) = s for s <= delta^2, else 2 delta sqrt(s) - delta^2."""
        s = np.asarray(squared, dtype=float)
        return np.where(
            s <= self.delta ** 2, s, 2.0 * self.delta * np.sqrt(np.maximum(s, 0.0)) - self.delta ** 2
        )


def robust_weight(loss: RobustLoss, whitened_norm: float) -> float:
    if whitened_norm < 0:
        raise ValueError("whitened norm must be non-negative")
    return float(loss.weight(whitened_norm))


def huber_cost(loss: RobustLoss, squared: float) -> float:
    return float(loss.cost(squared))


# ---- SDF factor ----

def sdf_residual(sdf_map: SdfMap, p_world: np.ndarray) -> float:
    """phi(p) in meters; raises Unobserved."""
    return sdf_map.interpolate(p_world).distance


def sdf_jacobians(
    sdf_map: SdfMap, point: np.ndarray, pose: Optional[Pose] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of phi(T p).

    With ``pose`` omitted the point is already in the map frame and J_point is the
    interpolated gradient. With a pose, J_point is taken with respect to the local point
    and J_pose with respect to the left twist on T.

    Returns:
        (J_point (1,3), J_pose (1,6))

    Raises:
        Unobserved: If the query touches unobserved voxels
    """
    pose = pose or Pose.identity()
    moved = pose.transform(np.asarray(point, dtype=float))
    grad = sdf_map.interpolate(moved).gradient
    j_point = (grad @ pose.rotation)[None, :]
    j_pose = (grad @ pose_point_jacobian_at(moved))[None, :]
    return j_point, j_pose


def sdf_terms(sdf_map: SdfMap, points: np.ndarray, pose: Optional[Pose] = None):
    """
    Batched SDF residuals and Jacobians.

    Args:
        sdf_map: Prior map
        points: (N,3) points, in the frame of ``pose`` if given
        pose: Optional transform into the map frame

    Returns:
        (residuals (N,), J_point (N,3), J_pose (N,6), observed (N,))
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if pose is None:
        moved, rotation = points, np.eye(3)
    else:
        moved, rotation = pose.transform(points), pose.rotation
    distances, gradients, observed = sdf_map.interpolate_batch(moved)
    j_point = gradients @ rotation
    j_pose = np.einsum("ni,nij->nj", gradients, pose_point_jacobian_at(moved))
    return distances, j_point, j_pose, observed


# ---- reprojection factor ----

def reprojection_residual(
    camera: CameraIntrinsics, pose: Pose, p_world: np.ndarray, measured: Pixel
) -> np.ndarray:
    """u_meas - pi(T p); raises BehindCamera."""
    predicted = project(camera, pose.transform(np.asarray(p_world, dtype=float)))
    return measured.vector() - predicted.vector()


def reprojection_jacobians(
    camera: CameraIntrinsics, pose: Pose, p_world: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of the reprojection residual.

    Returns:
        (J_point (2,3), J_pose (2,6)) with J_point = -J_pi R and J_pose = -J_pi [I | -p_c^]

    Raises:
        BehindCamera: If the point is not in front of the camera
    """
    p_cam = pose.transform(np.asarray(p_world, dtype=float))
    # project raises BehindCamera on the same depth test
    project(camera, p_cam)
    j_proj = project_jacobians(camera, p_cam[None, :])[0]
    return -j_proj @ pose.rotation, -j_proj @ pose_point_jacobian_at(p_cam)


def reprojection_terms(
    camera: CameraIntrinsics,
    rotations: np.ndarray,
    translations: np.ndarray,
    points: np.ndarray,
    measured: np.ndarray,
):
    """
    Batched reprojection residuals and Jacobians, one row per observation.

    Args:
        camera: Intrinsics
        rotations: (N,3,3) world-to-camera rotations
        translations: (N,3) world-to-camera translations
        points: (N,3) world points
        measured: (N,2) measured pixels

    Returns:
        (residuals (N,2), J_point (N,2,3), J_pose (N,2,6), in_front (N,)); rows of points
        behind the camera are zero
    """
    p_cam = np.einsum("nij,nj->ni", rotations, points) + translations
    uv, in_front = project_points(camera, p_cam)
    j_proj = project_jacobians(camera, p_cam)
    residuals = np.where(in_front[:, None], measured - uv, 0.0)
    j_point = -np.einsum("nij,njk->nik", j_proj, rotations)
    j_pose = -np.einsum("nij,njk->nik", j_proj, pose_point_jacobian_at(p_cam))
    j_point = np.where(in_front[:, None, None], j_point, 0.0)
    j_pose = np.where(in_front[:, None, None], j_pose, 0.0)
    return residuals, j_point, j_pose, in_front
