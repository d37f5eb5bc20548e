"""
Trajectory and structure accuracy metrics.
"""
from enum import Enum
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from sdfloc.errors import AssociationFailure
from sdfloc.frontend_sim import Trajectory
from sdfloc.geometry import Pose, rotation_angle
from sdfloc.scene import Primitive, scene_distance
from sdfloc.schemas import FrameError

MAX_TIME_DIFFERENCE = 0.01  # seconds


class Alignment(str, Enum):
    NONE = "none"
    RIGID = "rigid"
    SIMILARITY = "similarity"


def rmse(values: Sequence[float]) -> float:
    """sqrt(mean(values^2)); 0 for an empty sequence."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(values ** 2)))


def associate(
    estimated: np.ndarray, ground_truth: np.ndarray, max_difference: float = MAX_TIME_DIFFERENCE
) -> List[Tuple[int, int]]:
    """
    Match each estimated timestamp to the nearest ground-truth timestamp.

    Returns:
        (estimated index, ground-truth index) pairs within ``max_difference``, each
        ground-truth stamp used at most once
    """
    estimated = np.asarray(estimated, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if len(ground_truth) == 0:
        return []
    right = np.clip(np.searchsorted(ground_truth, estimated), 0, len(ground_truth) - 1)
    left = np.clip(right - 1, 0, len(ground_truth) - 1)
    nearest = np.where(
        np.abs(ground_truth[left] - estimated) <= np.abs(ground_truth[right] - estimated), left, right
    )
    pairs, used = [], set()
    for i, j in enumerate(nearest):
        if abs(ground_truth[j] - estimated[i]) <= max_difference and j not in used:
            pairs.append((i, int(j)))
            used.add(int(j))
    return pairs


def umeyama_alignment(
    source: np.ndarray, target: np.ndarray, with_scale: bool = True
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Closed-form least-squares alignment target ~ s R source + t.

    Args:
        source: (N,3) points
        target: (N,3) points
        with_scale: Estimate s; otherwise s = 1

    Returns:
        (s, R (3,3), t (3,))
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    src, tgt = source - mu_s, target - mu_t

    covariance = tgt.T @ src / len(source)
    u, d, vt = np.linalg.svd(covariance)
    signs = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        signs[2, 2] = -1.0
    rotation = u @ signs @ vt
    variance = np.mean(np.sum(src ** 2, axis=1))
    scale = float(np.trace(np.diag(d) @ signs) / variance) if with_scale and variance > 0 else 1.0
    return scale, rotation, mu_t - scale * rotation @ mu_s


def compute_ate(
    estimated: Trajectory,
    ground_truth: Trajectory,
    mode: Union[Alignment, str] = Alignment.NONE,
    max_difference: float = MAX_TIME_DIFFERENCE,
) -> Tuple[float, float, List[FrameError]]:
    """
    Absolute trajectory error of camera-to-world poses.

    Args:
        estimated: Estimated trajectory
        ground_truth: Reference trajectory
        mode: 'none' compares in the shared map frame; 'rigid' and 'similarity' first
            align the estimated positions to the reference
        max_difference: Association window (seconds)

    Returns:
        (translation RMSE in m, rotation RMSE in deg, per-frame errors)

    Raises:
        AssociationFailure: If fewer than 2 timestamps match
    """
    mode = Alignment(mode)
    pairs = associate(estimated.timestamps, ground_truth.timestamps, max_difference)
    if len(pairs) < 2:
        raise AssociationFailure(f"only {len(pairs)} timestamps matched within {max_difference}s")

    est = [estimated.poses[i] for i, _ in pairs]
    ref = [ground_truth.poses[j] for _, j in pairs]
    if mode != Alignment.NONE:
        scale, rotation, translation = umeyama_alignment(
            np.array([p.translation for p in est]),
            np.array([p.translation for p in ref]),
            with_scale=mode == Alignment.SIMILARITY,
        )
        est = [
            Pose(rotation @ p.rotation, scale * rotation @ p.translation + translation) for p in est
        ]

    frames = [
        FrameError(
            frame=i,
            timestamp=float(estimated.timestamps[i]),
            translation_error=float(np.linalg.norm(e.translation - r.translation)),
            rotation_error=float(np.degrees(rotation_angle(r.rotation.T @ e.rotation))),
        )
        for (i, _), e, r in zip(pairs, est, ref)
    ]
    return (
        rmse([f.translation_error for f in frames]),
        rmse([f.rotation_error for f in frames]),
        frames,
    )


def compute_structure_rmse(
    points: np.ndarray, reference: Union[Sequence[Primitive], np.ndarray]
) -> float:
    """
    RMSE of landmark distances to the reference surface.

    Args:
        points: (N,3) landmark positions
        reference: Analytic primitives (exact distance) or an (M,3) surface sample set
            (nearest-neighbour distance)
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("structure RMSE needs at least one landmark")
    if isinstance(reference, np.ndarray):
        if len(reference) == 0:
            raise ValueError("reference point set is empty")
        distances, _ = cKDTree(reference.reshape(-1, 3)).query(points)
    else:
        distances = scene_distance(list(reference), points)
    return rmse(distances)
