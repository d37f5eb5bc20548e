from pydantic import BaseModel, Field
from typing import Dict, List, Optional


# Solver Reports

class RoundReport(BaseModel):
    """One Levenberg-Marquardt run to convergence."""
    stage: str = Field(..., description="'pose', 'structure', 'joint-1' or 'joint-2'")
    iterations: int = Field(0, ge=0, description="Linear solves attempted, accepted or not")
    initial_energy: float
    final_energy: float
    energy_history: List[float] = Field(
        default_factory=list,
        description="Energy after every accepted step, starting with the initial energy"
    )
    termination: str = Field(
        ...,
        description="'converged', 'max_iterations', 'damping_exhausted', 'singular' or 'empty'"
    )
    converged: bool
    final_beta: float


class SolveReport(BaseModel):
    """Result of refine_pose, refine_structure or joint_optimize."""
    stage: str
    rounds: List[RoundReport] = Field(default_factory=list)
    initial_energy: float = 0.0
    final_energy: float = 0.0
    repro_energy: float = Field(0.0, description="Robustified reprojection energy at the end")
    sdf_energy: float = Field(0.0, description="Robustified SDF energy at the end, before lambda")
    outliers_removed: List[int] = Field(
        default_factory=list,
        description="Landmarks removed by the chi-squared test between the two rounds"
    )
    sdf_deactivated: List[int] = Field(
        default_factory=list,
        description="Landmarks whose SDF factor was switched off (tolerant occlusion)"
    )
    final_outliers: List[int] = Field(
        default_factory=list,
        description="Landmarks dismissed after the last round"
    )
    migrated_to_n: List[int] = Field(default_factory=list)
    skipped_landmarks: List[int] = Field(
        default_factory=list,
        description="Under-constrained landmarks left untouched"
    )
    flagged_landmarks: List[int] = Field(
        default_factory=list,
        description="Landmarks seen behind an observing camera during the solve"
    )

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.rounds)

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.rounds)

    @property
    def termination(self) -> str:
        return self.rounds[-1].termination if self.rounds else "empty"


# Evaluation Reports

class FrameError(BaseModel):
    frame: int = Field(..., ge=0, description="Keyframe index in the sequence")
    timestamp: float
    translation_error: float = Field(..., ge=0.0, description="meters")
    rotation_error: float = Field(..., ge=0.0, description="degrees")


class EvaluationReport(BaseModel):
    """Accuracy, structure quality and timing of one localization run."""
    ate_translation_rmse: float = Field(..., description="ATE translation RMSE (m)")
    ate_rotation_rmse: float = Field(..., description="ATE rotation RMSE (deg)")
    alignment: str = "none"
    frames: List[FrameError] = Field(default_factory=list)
    structure_rmse: Optional[float] = Field(None, description="After refinement (m)")
    structure_rmse_initial: Optional[float] = Field(None, description="Landmarks at birth (m)")
    recovered_scale: Optional[float] = Field(
        None,
        description="Estimated over true inter-keyframe translation length"
    )
    odometry_ate_translation_rmse: Optional[float] = Field(
        None,
        description="ATE of the uncorrected odometry over the same keyframes (m)"
    )
    inliers: int = 0
    outliers: int = 0
    not_converged_frames: List[int] = Field(default_factory=list)
    stage_ms: Dict[str, float] = Field(default_factory=dict, description="Total time per stage")

    def to_text(self) -> str:
        lines = [
            f"ATE translation RMSE: {self.ate_translation_rmse:.6f} m (alignment: {self.alignment})",
            f"ATE rotation RMSE:    {self.ate_rotation_rmse:.6f} deg",
        ]
        if self.odometry_ate_translation_rmse is not None:
            lines.append(f"Odometry ATE RMSE:    {self.odometry_ate_translation_rmse:.6f} m")
        if self.structure_rmse is not None:
            lines.append(f"Structure RMSE:       {self.structure_rmse:.6f} m")
        if self.structure_rmse_initial is not None:
            lines.append(f"Structure RMSE (pre): {self.structure_rmse_initial:.6f} m")
        if self.recovered_scale is not None:
            lines.append(f"Recovered scale:      {self.recovered_scale:.6f}")
        lines.append(f"Landmarks: {self.inliers} inliers, {self.outliers} outliers")
        lines.append(f"Frames evaluated: {len(self.frames)}, not converged: {len(self.not_converged_frames)}")
        for stage, ms in sorted(self.stage_ms.items()):
            lines.append(f"  {stage:<10} {ms:10.1f} ms")
        return "\n".join(lines) + "\n"


class SweepCell(BaseModel):
    """One (axis, magnitude, seed) cell of a perturbation sweep."""
    axis: str
    magnitude: float
    seed: int
    ate_translation_rmse: Optional[float] = None
    ate_rotation_rmse: Optional[float] = None
    converged: bool = True
    error: Optional[str] = Field(None, description="Error type name when the cell failed")
