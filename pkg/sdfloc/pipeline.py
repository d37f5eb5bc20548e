"""
Track-then-localize pipeline over a synthetic sequence, plus the evaluation helpers
around it: trajectory files, reports, stage metrics and perturbation sweeps.
"""
import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from sdfloc.config import SolverConfig, get_settings, load_solver_config
from sdfloc.errors import (
    ConfigError,
    DegenerateProblem,
    NotConverged,
    SdfLocError,
    TriangulationDegenerate,
)
from sdfloc.frontend_sim import (
    ANCHOR_REGION,
    ROOM_BOUNDS,
    OdometryNoiseModel,
    SyntheticScene,
    TrackTable,
    Trajectory,
    corrupt_odometry,
    generate_landmark,
    generate_tracks,
    make_orbit_trajectory,
    room_primitives,
    sample_anchors,
    triangulate_local_structure,
)
from sdfloc.geometry import CameraIntrinsics, Pose
from sdfloc.logging_config import get_logger
from sdfloc.metrics import Alignment, compute_ate, compute_structure_rmse
from sdfloc.optimizer import Keyframe, Problem, joint_optimize, refine_pose, refine_structure
from sdfloc.scene import load_scene
from sdfloc.schemas import EvaluationReport, SweepCell
from sdfloc.sdf_map import SdfMap, build_from_analytic, load_map

logger = get_logger("pipeline")
settings = get_settings()

PERTURBATION_AXES = ("x", "y", "z", "roll", "pitch", "yaw")


class CameraConfig(BaseModel):
    fx: float = Field(400.0, gt=0)
    fy: float = Field(400.0, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    def to_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class PipelineConfig(BaseModel):
    """
    Everything a localization run needs.

    Input paths are optional: without a scene file the standard room is used, without a
    map file the map is voxelized from the scene, and without a trajectory file the
    standard orbit is generated.
    """
    scene_path: Optional[Path] = None
    map_path: Optional[Path] = None
    trajectory_path: Optional[Path] = Field(None, description="Ground truth, one pose per line")
    output_dir: Path = Field(default_factory=lambda: Path(settings.output_dir))
    solver: SolverConfig = Field(default_factory=lambda: SolverConfig(coupling=settings.default_coupling))
    solver_config: Optional[Path] = Field(None, description="key=value file replacing `solver`")

    keyframe_every: int = Field(1, ge=1)
    n_frames: int = Field(60, ge=2)
    frame_rate: float = Field(10.0, gt=0)
    anchor_count: int = Field(400, gt=0)
    pixel_sigma: float = Field(1.0, ge=0)
    odometry: OdometryNoiseModel = Field(default_factory=OdometryNoiseModel)
    seed: int = 0

    voxel_size: float = Field(default_factory=lambda: settings.default_voxel_size, gt=0)
    truncation_distance: Optional[float] = Field(None, gt=0)
    bounds: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ROOM_BOUNDS
    anchor_region: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ANCHOR_REGION
    max_range: float = Field(8.0, gt=0, description="Ray casting range (m)")
    camera: CameraConfig = Field(default_factory=CameraConfig)

    localization: bool = Field(True, description="False runs the odometry-only baseline")
    alignment: Alignment = Alignment.NONE
    strict: bool = Field(default_factory=lambda: settings.strict)

    model_config = {"extra": "forbid"}

    @field_validator("scene_path", "map_path", "trajectory_path", "solver_config")
    @classmethod
    def _must_exist(cls, value: Optional[Path]) -> Optional[Path]:
        if value is not None and not Path(value).is_file():
            raise ValueError(f"file not found: {value}")
        return value

    @model_validator(mode="after")
    def _load_solver_file(self):
        if self.solver_config is not None:
            self.solver = load_solver_config(self.solver_config)
        return self

    @property
    def truncation(self) -> float:
        if self.truncation_distance is not None:
            return self.truncation_distance
        return settings.truncation_voxels * self.voxel_size


def load_pipeline_config(path: Union[str, Path], **overrides) -> PipelineConfig:
    """
    Load a YAML pipeline configuration.

    Relative input paths are resolved against the config file's directory. Keyword
    overrides replace top-level keys.

    Raises:
        ConfigError: On unreadable YAML, missing files or invalid values
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"pipeline config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    for key in ("scene_path", "map_path", "trajectory_path", "solver_config"):
        if data.get(key) and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e


# ---- trajectory files ----

def write_trajectory(trajectory: Trajectory, path: Union[str, Path]) -> None:
    """Write `timestamp tx ty tz qx qy qz qw` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for stamp, pose in zip(trajectory.timestamps, trajectory.poses):
        quat = Rotation.from_matrix(pose.rotation).as_quat()
        if quat[3] < 0:
            quat = -quat
        values = [stamp, *pose.translation, *quat]
        lines.append(" ".join(f"{v:.9f}" for v in values))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_trajectory(path: Union[str, Path]) -> Trajectory:
    """
    Read a trajectory file.

    Raises:
        ConfigError: On a missing file or malformed rows
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"trajectory file not found: {path}")
    try:
        table = pd.read_csv(path, sep=r"\s+", comment="#", header=None).to_numpy(dtype=float)
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if table.ndim != 2 or table.shape[1] != 8:
        raise ConfigError(f"{path}: expected 8 columns per line")
    poses = tuple(
        Pose(Rotation.from_quat(row[4:8]).as_matrix(), row[1:4]) for row in table
    )
    try:
        return Trajectory(table[:, 0], poses)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


# ---- run metrics ----

class RunMetrics:
    """Per-run prometheus registry plus wall-clock totals per stage."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.stage_seconds = Histogram(
            "sdfloc_stage_seconds", "Time spent per pipeline stage", ["stage"],
            registry=self.registry,
        )
        self.frames = Counter("sdfloc_frames_total", "Keyframes processed", registry=self.registry)
        self.not_converged = Counter(
            "sdfloc_not_converged_total", "Keyframes whose solve did not converge",
            registry=self.registry,
        )
        self.outliers = Counter(
            "sdfloc_outliers_total", "Landmarks removed as outliers", registry=self.registry
        )
        self.stage_ms: Dict[str, float] = defaultdict(float)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.stage_seconds.labels(stage=name).observe(elapsed)
            self.stage_ms[name] += elapsed * 1000.0

    def write(self, path: Union[str, Path]) -> None:
        write_to_textfile(str(path), self.registry)


# ---- sequence preparation ----

@dataclass
class SequenceData:
    scene: SyntheticScene
    sdf_map: SdfMap
    camera: CameraIntrinsics
    ground_truth: Trajectory
    odometry: Trajectory
    tracks: TrackTable


def prepare_sequence(config: PipelineConfig, sdf_map: Optional[SdfMap] = None) -> SequenceData:
    """Build or load the scene, map, ground truth, tracks and corrupted odometry."""
    primitives = load_scene(config.scene_path) if config.scene_path else room_primitives()
    rng = np.random.default_rng(config.seed)
    scene = SyntheticScene(
        tuple(primitives),
        sample_anchors(primitives, config.anchor_count, rng, config.anchor_region),
        config.seed,
        config.bounds,
    )
    if sdf_map is None:
        if config.map_path:
            sdf_map = load_map(config.map_path)
        else:
            sdf_map = build_from_analytic(
                primitives, config.voxel_size, config.bounds, truncation_distance=config.truncation
            )
    if config.trajectory_path:
        ground_truth = read_trajectory(config.trajectory_path)
    else:
        ground_truth = make_orbit_trajectory(config.n_frames, config.frame_rate)
    camera = config.camera.to_intrinsics()
    tracks = generate_tracks(scene, ground_truth, camera, config.pixel_sigma, config.seed)
    odometry = corrupt_odometry(ground_truth, config.odometry, config.seed + 1)
    return SequenceData(scene, sdf_map, camera, ground_truth, odometry, tracks)


def perturb_pose(pose: Pose, axis: str, magnitude: float) -> Pose:
    """
    Offset a camera-to-world pose along one axis.

    x, y, z shift the camera center by ``magnitude`` meters; roll, pitch, yaw rotate the
    camera about the world x, y, z axes through its center by ``magnitude`` degrees.
    """
    if axis not in PERTURBATION_AXES:
        raise ValueError(f"unknown perturbation axis {axis!r}. Available: {list(PERTURBATION_AXES)}")
    index = PERTURBATION_AXES.index(axis)
    if index < 3:
        offset = np.zeros(3)
        offset[index] = magnitude
        return Pose(pose.rotation, pose.translation + offset)
    rotvec = np.zeros(3)
    rotvec[index - 3] = np.radians(magnitude)
    return Pose(Rotation.from_rotvec(rotvec).as_matrix() @ pose.rotation, pose.translation)


# ---- localization ----

@dataclass
class LocalizationResult:
    keyframes: List[int]
    estimated: Trajectory
    problem: Optional[Problem]
    birth_positions: Dict[int, np.ndarray] = field(default_factory=dict)
    outliers: int = 0
    not_converged_frames: List[int] = field(default_factory=list)
    metrics: RunMetrics = field(default_factory=RunMetrics)


def _add_landmarks(
    problem: Problem,
    sequence: SequenceData,
    frame: int,
    config: PipelineConfig,
    births: Dict[int, np.ndarray],
    rejected: set,
) -> None:
    """Attach this frame's observations, generating landmarks for new tracks."""
    keyframe_poses = {k: kf.pose for k, kf in problem.keyframes.items()}
    for anchor, pixel in sorted(sequence.tracks.frame(frame).items()):
        if anchor in rejected:
            continue
        if anchor not in problem.landmarks:
            try:
                landmark = generate_landmark(
                    sequence.sdf_map, sequence.camera, keyframe_poses[frame], pixel,
                    sequence.tracks, keyframe_poses, anchor, max_range=config.max_range,
                )
            except TriangulationDegenerate:
                continue
            problem.add_landmark(landmark)
            births[anchor] = landmark.position.copy()
            for k in keyframe_poses:
                earlier = sequence.tracks.get(anchor, k)
                if earlier is not None and k != frame:
                    problem.add_observation(anchor, k, earlier)
        problem.add_observation(anchor, frame, pixel)


def localize_sequence(
    config: PipelineConfig,
    sequence: SequenceData,
    initial_offset: Optional[Tuple[str, float]] = None,
    show_progress: bool = False,
) -> LocalizationResult:
    """
    Run the track-then-localize loop over the keyframes of a sequence.

    Per keyframe: predict from odometry, refine the pose against the SDF using the
    odometry's local structure, add landmarks, refine structure, then optimize the window
    jointly. With localization disabled the odometry prediction is kept as is.

    Args:
        config: Pipeline configuration
        sequence: Prepared sequence
        initial_offset: Optional (axis, magnitude) perturbation of the first pose
        show_progress: Display a progress bar

    Raises:
        NotConverged: In strict mode, when a keyframe solve does not converge
    """
    metrics = RunMetrics()
    solver = config.solver
    frames = list(range(0, len(sequence.ground_truth), config.keyframe_every))
    odometry = sequence.odometry
    problem = Problem(sequence.camera, sequence.sdf_map, coupling=solver.coupling)
    estimates: Dict[int, Pose] = {}
    births: Dict[int, np.ndarray] = {}
    rejected: set = set()
    not_converged: List[int] = []
    outliers = 0

    for i, f in enumerate(tqdm(frames, desc="keyframes", disable=not show_progress)):
        metrics.frames.inc()
        with metrics.stage("predict"):
            if i == 0:
                predicted = odometry.poses[f]
                if initial_offset is not None:
                    predicted = perturb_pose(predicted, *initial_offset)
            else:
                previous = frames[i - 1]
                predicted = estimates[previous] @ (odometry.poses[previous].inverse() @ odometry.poses[f])
        if not config.localization:
            estimates[f] = predicted
            continue

        try:
            converged = True
            with metrics.stage("pose"):
                reference = frames[i - 1] if i > 0 else frames[1] if len(frames) > 1 else None
                pose = predicted
                if reference is not None:
                    _, local = triangulate_local_structure(
                        sequence.tracks, odometry, f, reference, sequence.camera
                    )
                    try:
                        pose, report = refine_pose(sequence.sdf_map, predicted, local, solver)
                        converged &= report.converged
                    except DegenerateProblem as e:
                        logger.warning(f"Frame {f}: pose refinement skipped ({e})")
            estimates[f] = pose
            problem.add_keyframe(Keyframe(f, pose.inverse(), timestamp=float(sequence.ground_truth.timestamps[f])))

            with metrics.stage("landmarks"):
                _add_landmarks(problem, sequence, f, config, births, rejected)
            with metrics.stage("structure"):
                report = refine_structure(problem, solver)
                converged &= report.converged
            if len(problem.keyframes) >= 2:
                with metrics.stage("joint"):
                    report = joint_optimize(problem, solver)
                converged &= report.converged
                removed = report.outliers_removed + report.final_outliers
                rejected.update(removed)
                outliers += len(removed)
                metrics.outliers.inc(len(removed))
                for k, kf in problem.keyframes.items():
                    estimates[k] = kf.pose.inverse()
        except SdfLocError as e:
            raise type(e)(f"frame {f}: {e}") from e

        if not converged:
            not_converged.append(f)
            metrics.not_converged.inc()
            logger.warning(f"Frame {f}: solve did not converge")
            if config.strict:
                raise NotConverged(f"frame {f}: solve did not converge")

    estimated = Trajectory(
        sequence.ground_truth.timestamps[frames], tuple(estimates[f] for f in frames)
    )
    return LocalizationResult(
        frames, estimated, problem if config.localization else None,
        births, outliers, not_converged, metrics,
    )


def recovered_scale(estimated: Trajectory, ground_truth: Trajectory) -> Optional[float]:
    """Total estimated over total true inter-frame translation length."""
    true_length = np.sum(np.linalg.norm(np.diff(ground_truth.positions, axis=0), axis=1))
    if true_length <= 0:
        return None
    return float(np.sum(np.linalg.norm(np.diff(estimated.positions, axis=0), axis=1)) / true_length)


def evaluate_result(
    config: PipelineConfig, sequence: SequenceData, result: LocalizationResult
) -> EvaluationReport:
    ground_truth = sequence.ground_truth.select(result.keyframes)
    t_rmse, r_rmse, frames = compute_ate(result.estimated, ground_truth, config.alignment)
    for error in frames:
        error.frame = result.keyframes[error.frame]
    odometry_rmse, _, _ = compute_ate(sequence.odometry.select(result.keyframes), ground_truth)

    report = EvaluationReport(
        ate_translation_rmse=t_rmse,
        ate_rotation_rmse=r_rmse,
        alignment=config.alignment.value,
        frames=frames,
        recovered_scale=recovered_scale(result.estimated, ground_truth),
        odometry_ate_translation_rmse=odometry_rmse,
        outliers=result.outliers,
        not_converged_frames=result.not_converged_frames,
        stage_ms=dict(result.metrics.stage_ms),
    )
    problem = result.problem
    if problem is not None and problem.landmarks:
        ids = sorted(problem.landmarks)
        final = np.array([problem.landmarks[i].position for i in ids])
        born = np.array([result.birth_positions[i] for i in ids])
        report.structure_rmse = compute_structure_rmse(final, sequence.scene.primitives)
        report.structure_rmse_initial = compute_structure_rmse(born, sequence.scene.primitives)
        report.inliers = len(ids)
    return report


def save_report(report: EvaluationReport, output_dir: Union[str, Path]) -> None:
    """Write report.json, report.txt, frames.csv and frames.jsonl."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    (output_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    rows = [f.model_dump() for f in report.frames]
    pd.DataFrame(rows, columns=["frame", "timestamp", "translation_error", "rotation_error"]).to_csv(
        output_dir / "frames.csv", index=False, float_format="%.12g"
    )
    with (output_dir / "frames.jsonl").open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def run_localization(
    config: PipelineConfig,
    sequence: Optional[SequenceData] = None,
    initial_offset: Optional[Tuple[str, float]] = None,
    write_outputs: bool = True,
) -> EvaluationReport:
    """
    Localize a synthetic sequence against its SDF map and evaluate the result.

    Writes trajectory.txt, the report files and metrics.prom to ``config.output_dir``
    unless ``write_outputs`` is False.
    """
    sequence = sequence or prepare_sequence(config)
    result = localize_sequence(config, sequence, initial_offset)
    report = evaluate_result(config, sequence, result)
    logger.info(
        f"Localization done: ATE {report.ate_translation_rmse:.4f} m "
        f"(odometry {report.odometry_ate_translation_rmse:.4f} m)"
    )
    if write_outputs:
        write_trajectory(result.estimated, config.output_dir / "trajectory.txt")
        save_report(report, config.output_dir)
        result.metrics.write(config.output_dir / "metrics.prom")
    return report


def perturbation_sweep(
    config: PipelineConfig,
    axis: str,
    magnitudes: Sequence[float],
    seeds: Optional[Sequence[int]] = None,
    output: Optional[Union[str, Path]] = None,
    show_progress: bool = False,
) -> List[SweepCell]:
    """
    ATE as a function of the initial pose error along one axis.

    Each seed draws a random sign for the offset. Failed cells are recorded with their
    error type and the sweep continues.

    Args:
        config: Base pipeline configuration
        axis: One of x, y, z (meters) or roll, pitch, yaw (degrees)
        magnitudes: Offsets to test
        seeds: Seeds per magnitude (default 10 seeds starting at config.seed)
        output: Optional CSV path for the table

    Returns:
        One SweepCell per (magnitude, seed)
    """
    if not magnitudes:
        raise ValueError("magnitudes must be non-empty")
    if axis not in PERTURBATION_AXES:
        raise ValueError(f"unknown perturbation axis {axis!r}. Available: {list(PERTURBATION_AXES)}")
    seeds = list(seeds) if seeds is not None else list(range(config.seed, config.seed + 10))

    sequences: Dict[int, SequenceData] = {}
    shared_map: Optional[SdfMap] = None
    cells: List[SweepCell] = []
    grid = [(m, s) for m in magnitudes for s in seeds]
    for magnitude, seed in tqdm(grid, desc=f"sweep {axis}", disable=not show_progress):
        run_config = config.model_copy(update={"seed": seed})
        sign = 1.0 if np.random.default_rng(seed).random() < 0.5 else -1.0
        cell = SweepCell(axis=axis, magnitude=float(magnitude), seed=seed)
        try:
            if seed not in sequences:
                sequences[seed] = prepare_sequence(run_config, shared_map)
                shared_map = sequences[seed].sdf_map
            report = run_localization(
                run_config, sequences[seed], (axis, sign * float(magnitude)), write_outputs=False
            )
            cell.ate_translation_rmse = report.ate_translation_rmse
            cell.ate_rotation_rmse = report.ate_rotation_rmse
            cell.converged = not report.not_converged_frames
        except SdfLocError as e:
            logger.warning(f"Sweep cell {axis}={magnitude} seed={seed} failed: {e}")
            cell.converged = False
            cell.error = type(e).__name__
        cells.append(cell)

    if output is not None:
        output = Path(output)
        output.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([c.model_dump() for c in cells]).to_csv(output, index=False, float_format="%.12g")
    return cells
