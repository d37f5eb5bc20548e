"""
Deterministic synthetic front-end: scene and camera path generation, noisy feature
tracks, odometry corruption and landmark generation.

Camera frame convention: x right, y down, z forward. Trajectory poses are camera-to-world;
keyframe poses handed to the solver are their inverses.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.spatial.transform import Rotation

from sdfloc.errors import NoVisibleFeatures, TriangulationDegenerate
from sdfloc.geometry import CameraIntrinsics, Pixel, Pose, exp_twist, project_points
from sdfloc.logging_config import get_logger
from sdfloc.optimizer import Landmark, Membership
from sdfloc.scene import Box, Plane, Primitive, Sphere, ray_intersect, scene_distance
from sdfloc.sdf_map import SdfMap

logger = get_logger("frontend_sim")

MIN_VISIBLE_ANCHORS = 8
MIN_PARALLAX_DEG = 1.0
NOISE_CLIP_SIGMAS = 4.0
ROOM_BOUNDS = ((-2.2, -2.2, -0.2), (2.2, 2.2, 2.5))
ANCHOR_REGION = ((-2.0, -2.0, 0.0), (2.0, 2.0, 2.2))


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Analytic primitives plus feature anchors lying on their surfaces."""
    primitives: Tuple[Primitive, ...]
    anchors: np.ndarray
    seed: int = 0
    bounds: Tuple[Tuple[float, ...], Tuple[float, ...]] = ROOM_BOUNDS


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Camera-to-world poses with strictly increasing timestamps (seconds)."""
    timestamps: np.ndarray
    poses: Tuple[Pose, ...]

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if np.any(np.diff(timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def select(self, indices: Sequence[int]) -> "Trajectory":
        return Trajectory(self.timestamps[list(indices)], tuple(self.poses[i] for i in indices))

    def check_velocity(self, max_translation: float, max_rotation: float) -> None:
        """Raise ValueError if a frame-to-frame step exceeds the bounds (m, rad)."""
        for k in range(1, len(self.poses)):
            delta = self.poses[k - 1].inverse() @ self.poses[k]
            angle = np.linalg.norm(_rotation_vector(delta.rotation))
            if np.linalg.norm(delta.translation) > max_translation or angle > max_rotation:
                raise ValueError(f"frame {k}: motion exceeds the velocity bounds")


class TrackTable:
    """Immutable pixel observations keyed by (anchor id, frame index)."""

    def __init__(self, observations: Mapping[Tuple[int, int], Pixel], n_frames: int):
        self._observations = MappingProxyType(dict(observations))
        self.n_frames = n_frames
        self._by_frame: Dict[int, Dict[int, Pixel]] = {}
        self._by_anchor: Dict[int, Dict[int, Pixel]] = {}
        for (a, f), px in sorted(self._observations.items()):
            self._by_frame.setdefault(f, {})[a] = px
            self._by_anchor.setdefault(a, {})[f] = px

    def __len__(self) -> int:
        return len(self._observations)

    def __contains__(self, key) -> bool:
        return key in self._observations

    def get(self, anchor_id: int, frame: int) -> Optional[Pixel]:
        return self._observations.get((anchor_id, frame))

    @property
    def observations(self) -> Mapping[Tuple[int, int], Pixel]:
        return self._observations

    def frame(self, frame: int) -> Dict[int, Pixel]:
        return dict(self._by_frame.get(frame, {}))

    def track(self, anchor_id: int) -> Dict[int, Pixel]:
        return dict(self._by_anchor.get(anchor_id, {}))

    def to_dataframe(self) -> pd.DataFrame:
        rows = [
            {"landmark_id": a, "keyframe_id": f, "u": px.u, "v": px.v, "level": px.level}
            for (a, f), px in sorted(self._observations.items())
        ]
        return pd.DataFrame(rows, columns=["landmark_id", "keyframe_id", "u", "v", "level"])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_dataframe().to_csv(path, index=False, float_format="%.9f")


class OdometryNoiseModel(BaseModel):
    """Per-frame odometry drift and an optional global scale corruption."""
    translation_sigma: float = Field(0.0, ge=0.0, description="meters per frame")
    rotation_sigma: float = Field(0.0, ge=0.0, description="radians per frame")
    scale: float = Field(1.0, gt=0.0, description="Applied to every inter-frame translation")


def _rotation_vector(rotation: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_rotvec()


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)


# ---- scene and path generation ----

def room_primitives() -> List[Primitive]:
    """Floor, two walls, two boxes and a sphere."""
    return [
        Plane((0.0, 0.0, 1.0), 0.0),
        Plane((1.0, 0.0, 0.0), -2.0),
        Plane((0.0, 1.0, 0.0), -2.0),
        Box((-1.2, 0.1, 0.3), (0.6, 0.5, 0.6)),
        Box((0.2, -1.3, 0.25), (0.5, 0.5, 0.5)),
        Sphere((-0.9, -0.9, 0.35), 0.35),
    ]


def _surface_area(primitive: Primitive, region) -> float:
    if isinstance(primitive, Sphere):
        return 4.0 * np.pi * primitive.radius ** 2
    if isinstance(primitive, Box):
        a, b, c = primitive.size
        return 2.0 * (a * b + b * c + c * a)
    extent = np.asarray(region[1]) - np.asarray(region[0])
    # Area of the region's cross-section orthogonal to the normal
    return float(np.prod(extent) / np.max(np.abs(primitive.normal) * extent))


def _sample_surface(primitive: Primitive, count: int, rng: np.random.Generator, region) -> np.ndarray:
    if isinstance(primitive, Sphere):
        directions = rng.normal(size=(count, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return primitive.center + primitive.radius * directions
    if isinstance(primitive, Box):
        lo = primitive.center - primitive.half
        points = lo + rng.random((count, 3)) * primitive.size
        axes = rng.integers(0, 3, size=count)
        sides = rng.integers(0, 2, size=count)
        points[np.arange(count), axes] = (primitive.center + (2 * sides - 1)[:, None] * primitive.half)[
            np.arange(count), axes
        ]
        return points
    lo, hi = (np.asarray(b, dtype=float) for b in region)
    points = lo + rng.random((count, 3)) * (hi - lo)
    return points - np.outer(primitive.distance(points), primitive.normal)


def sample_anchors(
    primitives: Sequence[Primitive],
    count: int,
    rng: np.random.Generator,
    region=ANCHOR_REGION,
) -> np.ndarray:
    """
    Sample feature anchors on the exposed surfaces of a scene.

    Surfaces are drawn in proportion to their area; samples hidden inside another
    primitive or outside ``region`` are rejected.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in region)
    areas = np.array([_surface_area(p, region) for p in primitives])
    anchors = np.zeros((0, 3))
    for _ in range(50):
        if len(anchors) >= count:
            break
        picks = rng.choice(len(primitives), size=2 * count, p=areas / areas.sum())
        batch = [
            _sample_surface(p, int(np.sum(picks == i)), rng, region)
            for i, p in enumerate(primitives) if np.any(picks == i)
        ]
        candidates = np.concatenate(batch)
        keep = (np.abs(scene_distance(primitives, candidates)) <= 1e-9) & np.all(
            (candidates >= lo - 1e-12) & (candidates <= hi + 1e-12), axis=1
        )
        anchors = np.concatenate([anchors, candidates[keep]])
    return anchors[:count]


def make_room_scene(seed: int = 0, anchor_count: int = 400) -> SyntheticScene:
    """The standard desk-scale room with anchors on its surfaces."""
    primitives = room_primitives()
    anchors = sample_anchors(primitives, anchor_count, np.random.default_rng(seed))
    return SyntheticScene(tuple(primitives), anchors, seed)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose at ``eye`` with the optical axis through ``target``."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.column_stack([right, down, forward]), eye)


def make_orbit_trajectory(
    n_frames: int,
    frame_rate: float = 10.0,
    target=(-1.0, -1.0, 0.4),
    radius: float = 2.2,
    height: float = 0.8,
    arc_deg: Tuple[float, float] = (10.0, 80.0),
) -> Trajectory:
    """Arc around ``target`` at constant radius, with a gentle vertical oscillation."""
    if n_frames < 2:
        raise ValueError("a trajectory needs at least 2 frames")
    target = np.asarray(target, dtype=float)
    angles = np.radians(np.linspace(arc_deg[0], arc_deg[1], n_frames))
    phase = np.linspace(0.0, 2.0 * np.pi, n_frames)
    poses = []
    for angle, wobble in zip(angles, phase):
        eye = target + np.array([
            radius * np.cos(angle), radius * np.sin(angle), height + 0.1 * np.sin(wobble)
        ])
        poses.append(look_at(eye, target))
    return Trajectory(np.arange(n_frames) / frame_rate, tuple(poses))


# ---- tracks and odometry ----

def generate_tracks(
    scene: SyntheticScene,
    trajectory: Trajectory,
    camera: CameraIntrinsics,
    pixel_sigma: float,
    seed: int,
) -> TrackTable:
    """
    Simulate feature tracks of every anchor visible in every frame.

    An anchor is visible when it projects inside the image in front of the camera and no
    primitive blocks the segment from the camera center. Noise is Gaussian per axis,
    clipped at 4 sigma.

    Raises:
        NoVisibleFeatures: If a frame sees fewer than 8 anchors
    """
    rng = np.random.default_rng(seed)
    observations: Dict[Tuple[int, int], Pixel] = {}
    for f, pose_wc in enumerate(trajectory.poses):
        noise = np.clip(
            rng.normal(0.0, 1.0, size=(len(scene.anchors), 2)), -NOISE_CLIP_SIGMAS, NOISE_CLIP_SIGMAS
        ) * pixel_sigma
        uv, in_front = project_points(camera, pose_wc.inverse().transform(scene.anchors))
        candidates = np.nonzero(in_front & camera.contains(uv))[0]
        center = pose_wc.translation
        seen = 0
        for a in candidates:
            offset = scene.anchors[a] - center
            distance = np.linalg.norm(offset)
            hit = ray_intersect(scene.primitives, center, offset / distance)
            if hit is not None and hit < distance - 1e-6 * (1.0 + distance):
                continue
            observations[(int(a), f)] = Pixel(*(uv[a] + noise[a]))
            seen += 1
        if seen < MIN_VISIBLE_ANCHORS:
            raise NoVisibleFeatures(f"frame {f} sees {seen} anchors, need {MIN_VISIBLE_ANCHORS}")
    logger.debug(f"Generated {len(observations)} observations over {len(trajectory)} frames")
    return TrackTable(observations, len(trajectory))


def corrupt_odometry(trajectory: Trajectory, noise: OdometryNoiseModel, seed: int) -> Trajectory:
    """
    Chain noisy, rescaled frame-to-frame motions from the first pose.

    Each body-frame delta has its translation multiplied by ``noise.scale`` and a random
    twist (sigma_t, sigma_r) applied on its left.
    """
    rng = np.random.default_rng(seed)
    poses = [trajectory.poses[0]]
    for k in range(1, len(trajectory)):
        delta = trajectory.poses[k - 1].inverse() @ trajectory.poses[k]
        xi = np.concatenate([
            rng.normal(0.0, noise.translation_sigma, 3), rng.normal(0.0, noise.rotation_sigma, 3)
        ])
        scaled = Pose(delta.rotation, noise.scale * delta.translation)
        poses.append(poses[-1] @ (exp_twist(xi) @ scaled))
    return Trajectory(trajectory.timestamps.copy(), tuple(poses))


# ---- triangulation and landmark generation ----

def _parallax_deg(directions: np.ndarray) -> float:
    cosines = np.clip(directions @ directions.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(np.min(cosines))))


def triangulate_midpoint(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Point closest in the least-squares sense to all rays (unit directions)."""
    projectors = np.eye(3)[None, :, :] - np.einsum("ni,nj->nij", directions, directions)
    a = projectors.sum(axis=0)
    b = np.einsum("nij,nj->i", projectors, origins)
    if np.linalg.cond(a) > 1e12:
        raise TriangulationDegenerate("rays are parallel")
    return np.linalg.solve(a, b)


def _world_ray(camera: CameraIntrinsics, pose_cw: Pose, pixel: Pixel):
    pose_wc = pose_cw.inverse()
    return pose_wc.translation, pose_wc.rotation @ camera.bearing(pixel.u, pixel.v)


def generate_landmark(
    sdf_map: SdfMap,
    camera: CameraIntrinsics,
    pose: Pose,
    pixel: Pixel,
    track_table: TrackTable,
    keyframes: Mapping[int, Pose],
    anchor_id: int,
    max_range: float = 10.0,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
) -> Landmark:
    """
    Create a landmark for a pixel observed in a keyframe.

    The optical ray is cast into the SDF first; a hit gives an M landmark on the surface
    whose depth uncertainty is one pixel of disparity over the widest keyframe baseline.
    On a miss the landmark is triangulated from every keyframe that tracked the anchor and
    tagged M if its SDF query is observed within the truncation band, N otherwise.

    Args:
        sdf_map: Prior map
        camera: Intrinsics
        pose: World-to-camera pose of the observing keyframe
        pixel: Observation in that keyframe
        track_table: Feature tracks for correspondence lookup
        keyframes: Frame index -> world-to-camera pose of the current keyframes
        anchor_id: Track id, reused as landmark id

    Raises:
        TriangulationDegenerate: If the ray misses and fewer than 2 views or too little
            parallax are available
    """
    origin, direction = _world_ray(camera, pose, pixel)
    hit = sdf_map.raycast(origin, direction, max_range)
    if hit is not None:
        centers = np.array([p.inverse().translation for p in keyframes.values()]).reshape(-1, 3)
        baseline = float(np.max(np.linalg.norm(centers - origin, axis=1), initial=0.0))
        depth_sigma = hit.depth ** 2 / (camera.fx * baseline) if baseline > 0 else None
        return Landmark(anchor_id, hit.point, Membership.M, depth_sigma=depth_sigma)

    views = [(f, px) for f, px in sorted(track_table.track(anchor_id).items()) if f in keyframes]
    if len(views) < 2:
        raise TriangulationDegenerate(f"anchor {anchor_id}: ray cast missed and only {len(views)} view(s)")
    rays = [_world_ray(camera, keyframes[f], px) for f, px in views]
    origins = np.array([r[0] for r in rays])
    directions = np.array([r[1] for r in rays])
    if _parallax_deg(directions) < min_parallax_deg:
        raise TriangulationDegenerate(f"anchor {anchor_id}: parallax below {min_parallax_deg} deg")
    point = triangulate_midpoint(origins, directions)
    if np.any(np.einsum("ni,ni->n", point - origins, directions) <= 0):
        raise TriangulationDegenerate(f"anchor {anchor_id}: triangulated behind a camera")

    d, _, observed = sdf_map.interpolate_batch(point[None, :])
    in_map = bool(observed[0]) and abs(d[0]) < sdf_map.truncation_distance
    return Landmark(anchor_id, point, Membership.M if in_map else Membership.N)


def triangulate_local_structure(
    track_table: TrackTable,
    odometry: Trajectory,
    frame: int,
    reference: int,
    camera: CameraIntrinsics,
    min_parallax_deg: float = MIN_PARALLAX_DEG,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two-view structure of a frame in its own camera coordinates.

    Anchors tracked in both frames are triangulated by the two-ray midpoint using the
    odometry's relative pose, so the result carries the odometry's scale.

    Returns:
        (anchor ids (N,), camera-frame points (N,3))
    """
    current = track_table.frame(frame)
    other = track_table.frame(reference)
    shared = np.array(sorted(set(current) & set(other)), dtype=int)
    if len(shared) == 0:
        return shared, np.zeros((0, 3))

    relative = odometry.poses[frame].inverse() @ odometry.poses[reference]
    d1 = np.array([camera.bearing(current[a].u, current[a].v) for a in shared])
    d2 = np.array([camera.bearing(other[a].u, other[a].v) for a in shared]) @ relative.rotation.T
    o2 = relative.translation

    b = np.einsum("ni,ni->n", d1, d2)
    d = d1 @ -o2
    e = d2 @ -o2
    denom = 1.0 - b ** 2
    keep = np.degrees(np.arccos(np.clip(b, -1.0, 1.0))) >= min_parallax_deg
    safe = np.where(keep, denom, 1.0)
    s = (b * e - d) / safe
    t = (e - b * d) / safe
    keep &= (s > 0) & (t > 0)
    points = 0.5 * (s[:, None] * d1 + o2 + t[:, None] * d2)
    return shared[keep], points[keep]
