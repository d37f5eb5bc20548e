"""
Levenberg-Marquardt solver for pose refinement, structure refinement and joint
pose+structure optimization against the SDF prior.

Energy of a problem:

    E = sum_repro rho(w ||u - pi(T p)||^2) + lambda * sum_sdf rho(w phi(p)^2)

with rho the Huber loss on whitened squared residuals. Damped normal equations
(H + beta I) delta = -g are solved with a Schur complement over the 3x3 landmark blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import sparse
from scipy.linalg import block_diag, cho_factor, cho_solve

from sdfloc.config import SolverConfig
from sdfloc.errors import DegenerateProblem, GaugeUnfixed, SingularSystem
from sdfloc.factors import (
    ReprojectionFactor,
    RobustLoss,
    SdfFactor,
    reprojection_terms,
    sdf_terms,
)
from sdfloc.geometry import CameraIntrinsics, Pixel, Pose, apply_twist
from sdfloc.logging_config import get_logger
from sdfloc.schemas import RoundReport, SolveReport
from sdfloc.sdf_map import SdfMap

logger = get_logger("optimizer")

_ENERGY_FLOOR = 1e-20
_GRADIENT_FLOOR = 1e-12


class Membership(str, Enum):
    """M: landmark carries an SDF factor. N: reprojection factors only."""
    M = "M"
    N = "N"


class GaugeMode(str, Enum):
    FIXED_KEYFRAME = "fixed_keyframe"
    SDF_ANCHORED = "sdf_anchored"


@dataclass
class Keyframe:
    id: int
    pose: Pose  # world-to-camera
    fixed: bool = False
    timestamp: float = 0.0


@dataclass(eq=False)
class Landmark:
    id: int
    position: np.ndarray
    membership: Membership = Membership.N
    observations: Set[int] = field(default_factory=set)
    depth_sigma: Optional[float] = None
    flagged: bool = False

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(3)


@dataclass
class FactorResiduals:
    """Whitened squared residuals, keyed by landmark id and (landmark id, keyframe id)."""
    sdf: Dict[int, float] = field(default_factory=dict)
    reprojection: Dict[Tuple[int, int], float] = field(default_factory=dict)


@dataclass(eq=False)
class Problem:
    """
    Keyframes, landmarks and the factors linking them.

    Every M landmark owns exactly one SDF factor; N landmarks own none. A landmark's
    observation set mirrors the keyframe ids of its reprojection factors.
    """
    camera: CameraIntrinsics
    sdf_map: SdfMap
    coupling: float = 1.0
    gauge: GaugeMode = GaugeMode.FIXED_KEYFRAME
    keyframes: Dict[int, Keyframe] = field(default_factory=dict)
    landmarks: Dict[int, Landmark] = field(default_factory=dict)
    sdf_factors: Dict[int, SdfFactor] = field(default_factory=dict)
    reprojection_factors: Dict[Tuple[int, int], ReprojectionFactor] = field(default_factory=dict)

    def __post_init__(self):
        if self.coupling < 0:
            raise ValueError("coupling factor must be non-negative")

    def add_keyframe(self, keyframe: Keyframe) -> Keyframe:
        if keyframe.id in self.keyframes:
            raise ValueError(f"keyframe {keyframe.id} already exists")
        self.keyframes[keyframe.id] = keyframe
        return keyframe

    def add_landmark(self, landmark: Landmark) -> Landmark:
        if landmark.id in self.landmarks:
            raise ValueError(f"landmark {landmark.id} already exists")
        landmark.observations = set()
        self.landmarks[landmark.id] = landmark
        if landmark.membership == Membership.M:
            self.sdf_factors[landmark.id] = SdfFactor(landmark.id, self.sdf_map.sdf_weight)
        return landmark

    def add_observation(self, landmark_id: int, keyframe_id: int, pixel: Pixel) -> ReprojectionFactor:
        if landmark_id not in self.landmarks:
            raise ValueError(f"unknown landmark {landmark_id}")
        if keyframe_id not in self.keyframes:
            raise ValueError(f"unknown keyframe {keyframe_id}")
        factor = ReprojectionFactor(landmark_id, keyframe_id, pixel)
        self.reprojection_factors[(landmark_id, keyframe_id)] = factor
        self.landmarks[landmark_id].observations.add(keyframe_id)
        return factor

    def remove_landmark(self, landmark_id: int) -> None:
        """Drop a landmark with all its observations and factors."""
        landmark = self.landmarks.pop(landmark_id)
        self.sdf_factors.pop(landmark_id, None)
        for keyframe_id in landmark.observations:
            self.reprojection_factors.pop((landmark_id, keyframe_id), None)

    def migrate_to_n(self, landmark_id: int) -> None:
        landmark = self.landmarks[landmark_id]
        landmark.membership = Membership.N
        self.sdf_factors.pop(landmark_id, None)

    def active_observations(self, landmark_id: int) -> int:
        return sum(
            1 for kf in self.landmarks[landmark_id].observations
            if self.reprojection_factors[(landmark_id, kf)].active
        )

    def has_active_sdf(self, landmark_id: int) -> bool:
        factor = self.sdf_factors.get(landmark_id)
        return self.coupling > 0 and factor is not None and factor.active

    @property
    def members(self) -> Tuple[List[int], List[int]]:
        """(M ids, N ids)."""
        m = sorted(i for i, lm in self.landmarks.items() if lm.membership == Membership.M)
        n = sorted(i for i, lm in self.landmarks.items() if lm.membership == Membership.N)
        return m, n

    def check_invariants(self) -> None:
        """Raise ValueError when the factor bookkeeping is inconsistent."""
        for lid, landmark in self.landmarks.items():
            has_sdf = lid in self.sdf_factors
            if has_sdf != (landmark.membership == Membership.M):
                raise ValueError(f"landmark {lid}: membership {landmark.membership.value} "
                                 f"but SDF factor present={has_sdf}")
            keyed = {kf for (l, kf) in self.reprojection_factors if l == lid}
            if keyed != landmark.observations:
                raise ValueError(f"landmark {lid}: observations do not match its factors")
        for (lid, kf) in self.reprojection_factors:
            if lid not in self.landmarks or kf not in self.keyframes:
                raise ValueError(f"factor ({lid}, {kf}) references a missing variable")
        for lid in self.sdf_factors:
            if lid not in self.landmarks:
                raise ValueError(f"SDF factor for missing landmark {lid}")

    def energy(self, loss: Optional[RobustLoss] = None) -> Tuple[float, float]:
        """
        Robustified energy split by factor type.

        Returns:
            (E_repro, E_sdf); the total is E_repro + coupling * E_sdf. Factors behind the
            camera or on unobserved voxels contribute nothing.
        """
        loss = loss or RobustLoss()
        residuals = compute_residuals(self)
        e_repro = math.fsum(
            float(loss.cost(s)) for s in residuals.reprojection.values() if math.isfinite(s)
        )
        e_sdf = math.fsum(float(loss.cost(s)) for s in residuals.sdf.values())
        return e_repro, e_sdf

    def total_energy(self, loss: Optional[RobustLoss] = None) -> float:
        """E_repro + coupling * E_sdf."""
        e_repro, e_sdf = self.energy(loss)
        return e_repro + self.coupling * e_sdf


# ---- linear algebra ----

@dataclass(eq=False)
class NormalEquations:
    """
    Block-sparse Gauss-Newton system.

    Pose blocks are block-diagonal since every residual touches at most one pose. Coupling
    blocks W are stored per (pose, landmark) pair.
    """
    hpp: np.ndarray  # (P,6,6)
    hll: np.ndarray  # (L,3,3)
    gp: np.ndarray  # (P,6)
    gl: np.ndarray  # (L,3)
    w_blocks: np.ndarray  # (F,6,3)
    w_pose: np.ndarray  # (F,)
    w_landmark: np.ndarray  # (F,)

    @classmethod
    def pose_only(cls, hessian: np.ndarray, gradient: np.ndarray) -> "NormalEquations":
        return cls(
            hessian.reshape(1, 6, 6), np.zeros((0, 3, 3)), gradient.reshape(1, 6),
            np.zeros((0, 3)), np.zeros((0, 6, 3)), np.zeros(0, dtype=int), np.zeros(0, dtype=int),
        )

    @property
    def n_poses(self) -> int:
        return len(self.hpp)

    @property
    def n_landmarks(self) -> int:
        return len(self.hll)

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.gp.ravel(), self.gl.ravel()])

    def _pose_landmark_matrix(self, blocks: np.ndarray) -> sparse.csr_matrix:
        rows = 6 * self.w_pose[:, None, None] + np.arange(6)[None, :, None]
        cols = 3 * self.w_landmark[:, None, None] + np.arange(3)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        return sparse.csr_matrix(
            (blocks.ravel(), (rows.ravel(), cols.ravel())),
            shape=(6 * self.n_poses, 3 * self.n_landmarks),
        )

    def dense(self, beta: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Full (H + beta I, g) with poses first, then landmarks."""
        n_p = 6 * self.n_poses
        n = n_p + 3 * self.n_landmarks
        hessian = np.zeros((n, n))
        for i, block in enumerate(self.hpp):
            hessian[6 * i:6 * i + 6, 6 * i:6 * i + 6] = block
        for j, block in enumerate(self.hll):
            hessian[n_p + 3 * j:n_p + 3 * j + 3, n_p + 3 * j:n_p + 3 * j + 3] = block
        for block, p, l in zip(self.w_blocks, self.w_pose, self.w_landmark):
            r, c = 6 * p, n_p + 3 * l
            hessian[r:r + 6, c:c + 3] += block
            hessian[c:c + 3, r:r + 6] += block.T
        return hessian + beta * np.eye(n), self.gradient()

    def solve(self, beta: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Solve (H + beta I) delta = -g by eliminating landmarks.

        Returns:
            (pose steps (P,6), landmark steps (L,3))

        Raises:
            SingularSystem: If the damped system is not positive definite
        """
        n_p, n_l = self.n_poses, self.n_landmarks
        try:
            hll_inv = np.linalg.inv(self.hll + beta * np.eye(3)) if n_l else np.zeros((0, 3, 3))
        except np.linalg.LinAlgError as e:
            raise SingularSystem(f"landmark block not invertible at beta={beta:g}") from e
        if not np.all(np.isfinite(hll_inv)):
            raise SingularSystem(f"landmark block not invertible at beta={beta:g}")
        if n_p == 0:
            return np.zeros((0, 6)), -np.einsum("lij,lj->li", hll_inv, self.gl)

        schur = block_diag(*self.hpp) + beta * np.eye(6 * n_p)
        rhs = -self.gp.ravel()
        if len(self.w_blocks):
            y = np.einsum("fij,fjk->fik", self.w_blocks, hll_inv[self.w_landmark])
            y_matrix = self._pose_landmark_matrix(y)
            schur = schur - (y_matrix @ self._pose_landmark_matrix(self.w_blocks).T).toarray()
            rhs = rhs + y_matrix @ self.gl.ravel()
        try:
            factor = cho_factor(schur)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularSystem(f"reduced pose system not positive definite at beta={beta:g}") from e
        dp = cho_solve(factor, rhs).reshape(n_p, 6)
        if not np.all(np.isfinite(dp)):
            raise SingularSystem(f"non-finite pose step at beta={beta:g}")
        if n_l == 0:
            return dp, np.zeros((0, 3))

        back = -self.gl.copy()
        if len(self.w_blocks):
            np.add.at(back, self.w_landmark,
                      -np.einsum("fij,fi->fj", self.w_blocks, dp[self.w_pose]))
        return dp, np.einsum("lij,lj->li", hll_inv, back)

    def quadratic(self, dp: np.ndarray, dl: np.ndarray) -> float:
        """delta^T H delta for the undamped system."""
        q = np.einsum("pi,pij,pj->", dp, self.hpp, dp) + np.einsum("li,lij,lj->", dl, self.hll, dl)
        if len(self.w_blocks):
            q += 2.0 * np.einsum(
                "fi,fij,fj->", dp[self.w_pose], self.w_blocks, dl[self.w_landmark]
            )
        return float(q)


def lm_step(equations: NormalEquations, beta: float) -> Tuple[np.ndarray, float]:
    """
    One damped Gauss-Newton step.

    Returns:
        (step vector, poses first, predicted energy decrease -(2 g.delta + delta^T H delta))
    """
    if beta <= 0:
        raise ValueError("damping must be positive")
    dp, dl = equations.solve(beta)
    step = np.concatenate([dp.ravel(), dl.ravel()])
    predicted = -(2.0 * float(equations.gradient() @ step) + equations.quadratic(dp, dl))
    return step, predicted


@dataclass
class _Linearization:
    energy: float
    equations: NormalEquations


def _levenberg_marquardt(
    stage: str,
    state,
    linearize: Callable[[object], _Linearization],
    trial_energy: Callable[[object], float],
    apply_step: Callable[[object, np.ndarray, np.ndarray], object],
    config: SolverConfig,
):
    """Accept a step iff the energy decreases; returns (final state, RoundReport)."""
    lin = linearize(state)
    initial = lin.energy
    history = [initial]
    beta = config.beta0
    iterations = 0
    termination = "max_iterations"

    while iterations < config.max_iterations:
        if lin.energy <= _ENERGY_FLOOR or np.max(np.abs(lin.equations.gradient()), initial=0.0) <= _GRADIENT_FLOOR:
            termination = "converged"
            break
        iterations += 1
        try:
            dp, dl = lin.equations.solve(beta)
        except SingularSystem as e:
            logger.debug(f"{stage}: {e}")
            beta *= config.beta_up
            if beta > config.beta_max:
                termination = "singular"
                break
            continue

        if math.sqrt(float(np.sum(dp ** 2) + np.sum(dl ** 2))) < config.step_tolerance:
            termination = "converged"
            break

        candidate = apply_step(state, dp, dl)
        energy = trial_energy(candidate)
        logger.debug(f"{stage} iter {iterations}: E={lin.energy:.6g} -> {energy:.6g}, beta={beta:.3g}")
        if energy < lin.energy:
            previous = lin.energy
            state = candidate
            lin = linearize(state)
            history.append(energy)
            beta = max(beta * config.beta_down, config.beta_min)
            if previous - energy <= config.energy_tolerance * previous:
                termination = "converged"
                break
        else:
            beta *= config.beta_up
            if beta > config.beta_max:
                termination = "damping_exhausted"
                break

    report = RoundReport(
        stage=stage,
        iterations=iterations,
        initial_energy=initial,
        final_energy=lin.energy,
        energy_history=history,
        termination=termination,
        converged=termination in ("converged", "damping_exhausted"),
        final_beta=beta,
    )
    return state, report


# ---- pose refinement ----

def refine_pose(
    sdf_map: SdfMap,
    initial: Pose,
    points: np.ndarray,
    config: Optional[SolverConfig] = None,
) -> Tuple[Pose, SolveReport]:
    """
    Align local structure with the SDF by optimizing a single pose.

    Minimizes sum rho(w phi(T p)^2) over T with the points held fixed. The set of points
    used is fixed at the start: those whose query is observed under the initial pose.

    Args:
        sdf_map: Prior map
        initial: Initial pose mapping the points into the map frame
        points: (N,3) local structure
        config: Solver configuration

    Returns:
        (refined pose, SolveReport); a non-converged solve returns the best iterate and
        reports termination 'max_iterations'

    Raises:
        DegenerateProblem: If fewer than ``min_pose_landmarks`` points are observed
    """
    config = config or SolverConfig()
    loss = RobustLoss(config.huber_delta)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    _, _, _, observed = sdf_terms(sdf_map, points, initial)
    usable = points[observed]
    if len(usable) < config.min_pose_landmarks:
        raise DegenerateProblem(
            f"pose refinement needs {config.min_pose_landmarks} observed landmarks, got {len(usable)}"
        )
    weight = sdf_map.sdf_weight

    def linearize(pose: Pose) -> _Linearization:
        d, _, jac, _ = sdf_terms(sdf_map, usable, pose)
        squared = weight * d ** 2
        coef = loss.weight(np.sqrt(squared)) * weight
        hessian = np.einsum("n,ni,nj->ij", coef, jac, jac)
        gradient = np.einsum("n,ni,n->i", coef, jac, d)
        return _Linearization(math.fsum(loss.cost(squared)), NormalEquations.pose_only(hessian, gradient))

    def trial_energy(pose: Pose) -> float:
        d, _, _, obs = sdf_terms(sdf_map, usable, pose)
        if not np.all(obs):
            return math.inf
        return math.fsum(loss.cost(weight * d ** 2))

    def apply_step(pose: Pose, dp: np.ndarray, dl: np.ndarray) -> Pose:
        return apply_twist(dp[0], pose)

    pose, round_report = _levenberg_marquardt("pose", initial, linearize, trial_energy, apply_step, config)
    if not round_report.converged:
        logger.warning(f"Pose refinement stopped without converging ({round_report.termination})")
    report = SolveReport(
        stage="pose",
        rounds=[round_report],
        initial_energy=round_report.initial_energy,
        final_energy=round_report.final_energy,
        sdf_energy=round_report.final_energy,
    )
    return pose, report


# ---- structure and joint refinement ----

class _BundleRound:
    """Factor arrays and variable layout of one structure or joint LM round."""

    def __init__(self, problem: Problem, pose_ids: Sequence[int], landmark_ids: Sequence[int],
                 loss: RobustLoss):
        self.problem = problem
        self.loss = loss
        self.pose_ids = list(pose_ids)
        self.landmark_ids = list(landmark_ids)
        free_poses, free_landmarks = set(self.pose_ids), set(self.landmark_ids)

        self.keys = [
            key for key, factor in problem.reprojection_factors.items()
            if factor.active and (key[0] in free_landmarks or key[1] in free_poses)
        ]
        self.kf_ids = sorted({k[1] for k in self.keys} | free_poses)
        self.lm_ids = sorted({k[0] for k in self.keys} | free_landmarks)
        kf_slot = {kid: i for i, kid in enumerate(self.kf_ids)}
        lm_slot = {lid: i for i, lid in enumerate(self.lm_ids)}

        factors = [problem.reprojection_factors[k] for k in self.keys]
        self.factor_kf = np.array([kf_slot[k[1]] for k in self.keys], dtype=int)
        self.factor_lm = np.array([lm_slot[k[0]] for k in self.keys], dtype=int)
        self.measured = np.array([f.pixel.vector() for f in factors]).reshape(-1, 2)
        self.weights = np.array([f.weight for f in factors])

        self.pose_var = np.full(len(self.kf_ids), -1, dtype=int)
        for i, kid in enumerate(self.pose_ids):
            self.pose_var[kf_slot[kid]] = i
        self.landmark_var = np.full(len(self.lm_ids), -1, dtype=int)
        for i, lid in enumerate(self.landmark_ids):
            self.landmark_var[lm_slot[lid]] = i

        self.sdf_ids = [lid for lid in self.landmark_ids if problem.has_active_sdf(lid)]
        self.sdf_slot = np.array([lm_slot[lid] for lid in self.sdf_ids], dtype=int)
        self.sdf_weights = np.array([problem.sdf_factors[lid].weight for lid in self.sdf_ids])

        self.suspended = np.zeros(len(self.keys), dtype=bool)
        self.sdf_live = np.ones(len(self.sdf_ids), dtype=bool)
        self.flagged: Set[int] = set()
        self.migrated: List[int] = []
        self._last = None

    def initial_state(self):
        poses = [self.problem.keyframes[k].pose for k in self.kf_ids]
        points = np.array([self.problem.landmarks[l].position for l in self.lm_ids]).reshape(-1, 3)
        return poses, points

    def _evaluate(self, state):
        poses, points = state
        if self.kf_ids:
            rotations = np.stack([p.rotation for p in poses])
            translations = np.stack([p.translation for p in poses])
        else:
            rotations, translations = np.zeros((0, 3, 3)), np.zeros((0, 3))
        r, j_point, j_pose, valid = reprojection_terms(
            self.problem.camera, rotations[self.factor_kf], translations[self.factor_kf],
            points[self.factor_lm], self.measured,
        )
        squared = self.weights * np.sum(r ** 2, axis=1)
        d, j_sdf, _, observed = sdf_terms(self.problem.sdf_map, points[self.sdf_slot])
        sdf_squared = self.sdf_weights * d ** 2
        return {
            "r": r, "j_point": j_point, "j_pose": j_pose, "valid": valid,
            "squared": squared, "cost": self.loss.cost(squared),
            "d": d, "j_sdf": j_sdf, "observed": observed,
            "sdf_squared": sdf_squared,
            "sdf_cost": self.problem.coupling * self.loss.cost(sdf_squared),
        }

    def _energy(self, ev) -> float:
        return (math.fsum(ev["cost"][~self.suspended & ev["valid"]])
                + math.fsum(ev["sdf_cost"][self.sdf_live & ev["observed"]]))

    def linearize(self, state) -> _Linearization:
        ev = self._evaluate(state)
        # Behind-camera factors sit out this iteration only
        behind = ~ev["valid"]
        self.suspended = behind
        if np.any(behind):
            for idx in np.nonzero(behind)[0]:
                lid = self.keys[idx][0]
                self.problem.landmarks[lid].flagged = True
                self.flagged.add(lid)
        lost = ~ev["observed"] & self.sdf_live
        if np.any(lost):
            self.sdf_live &= ~lost
            for idx in np.nonzero(lost)[0]:
                lid = self.sdf_ids[idx]
                self.problem.migrate_to_n(lid)
                self.migrated.append(lid)
                logger.warning(f"Landmark {lid} left the observed map, moved to N")
        self._last = ev

        n_p, n_l = len(self.pose_ids), len(self.landmark_ids)
        hpp, gp = np.zeros((n_p, 6, 6)), np.zeros((n_p, 6))
        hll, gl = np.zeros((n_l, 3, 3)), np.zeros((n_l, 3))

        active = ~self.suspended
        coef = np.where(active, self.loss.weight(np.sqrt(ev["squared"])) * self.weights, 0.0)
        pose_var = self.pose_var[self.factor_kf]
        lm_var = self.landmark_var[self.factor_lm]
        r, jp, jx = ev["r"], ev["j_point"], ev["j_pose"]

        sel = active & (pose_var >= 0)
        np.add.at(hpp, pose_var[sel], coef[sel, None, None] * np.einsum("nki,nkj->nij", jx[sel], jx[sel]))
        np.add.at(gp, pose_var[sel], coef[sel, None] * np.einsum("nki,nk->ni", jx[sel], r[sel]))
        sel = active & (lm_var >= 0)
        np.add.at(hll, lm_var[sel], coef[sel, None, None] * np.einsum("nki,nkj->nij", jp[sel], jp[sel]))
        np.add.at(gl, lm_var[sel], coef[sel, None] * np.einsum("nki,nk->ni", jp[sel], r[sel]))
        sel = active & (pose_var >= 0) & (lm_var >= 0)
        w_blocks = coef[sel, None, None] * np.einsum("nki,nkj->nij", jx[sel], jp[sel])

        live = self.sdf_live
        if np.any(live):
            sdf_coef = (self.problem.coupling * self.sdf_weights[live]
                        * self.loss.weight(np.sqrt(ev["sdf_squared"][live])))
            var = self.landmark_var[self.sdf_slot[live]]
            grad = ev["j_sdf"][live]
            np.add.at(hll, var, sdf_coef[:, None, None] * np.einsum("ni,nj->nij", grad, grad))
            np.add.at(gl, var, (sdf_coef * ev["d"][live])[:, None] * grad)

        equations = NormalEquations(hpp, hll, gp, gl, w_blocks, pose_var[sel], lm_var[sel])
        return _Linearization(self._energy(ev), equations)

    def trial_energy(self, state) -> float:
        ev = self._evaluate(state)
        if np.any(~ev["valid"] & ~self.suspended):
            return math.inf
        # Terms whose query leaves the map keep their last cost until migrated
        sdf_cost = np.where(ev["observed"], ev["sdf_cost"], self._last["sdf_cost"])
        return math.fsum(ev["cost"][~self.suspended]) + math.fsum(sdf_cost[self.sdf_live])

    def apply_step(self, state, dp: np.ndarray, dl: np.ndarray):
        poses, points = state
        poses = list(poses)
        for slot in np.nonzero(self.pose_var >= 0)[0]:
            poses[slot] = apply_twist(dp[self.pose_var[slot]], poses[slot])
        points = points.copy()
        slots = np.nonzero(self.landmark_var >= 0)[0]
        points[slots] += dl[self.landmark_var[slots]]
        return poses, points

    def commit(self, state) -> None:
        poses, points = state
        for slot in np.nonzero(self.pose_var >= 0)[0]:
            self.problem.keyframes[self.kf_ids[slot]].pose = poses[slot]
        for slot in np.nonzero(self.landmark_var >= 0)[0]:
            lid = self.lm_ids[slot]
            if lid in self.problem.landmarks:
                self.problem.landmarks[lid].position = points[slot].copy()

    def run(self, stage: str, config: SolverConfig) -> RoundReport:
        for lid in self.lm_ids:
            if lid in self.problem.landmarks:
                self.problem.landmarks[lid].flagged = False
        state, report = _levenberg_marquardt(
            stage, self.initial_state(), self.linearize, self.trial_energy, self.apply_step, config
        )
        self.commit(state)
        return report


def linearize_problem(
    problem: Problem,
    pose_ids: Sequence[int],
    landmark_ids: Sequence[int],
    loss: Optional[RobustLoss] = None,
) -> Tuple[float, NormalEquations]:
    """Energy and normal equations at the current state for the given free variables."""
    bundle = _BundleRound(problem, pose_ids, landmark_ids, loss or RobustLoss())
    lin = bundle.linearize(bundle.initial_state())
    return lin.energy, lin.equations


def _eligible_landmarks(problem: Problem, keyframe_ids: Optional[Set[int]] = None):
    """Landmarks with >= 2 active observations, or 1 plus an active SDF factor."""
    eligible, skipped = [], []
    for lid in sorted(problem.landmarks):
        landmark = problem.landmarks[lid]
        if keyframe_ids is not None and not (landmark.observations & keyframe_ids):
            continue
        n_obs = problem.active_observations(lid)
        if n_obs >= 2 or (n_obs == 1 and problem.has_active_sdf(lid)):
            eligible.append(lid)
        else:
            skipped.append(lid)
    return eligible, skipped


def refine_structure(problem: Problem, config: Optional[SolverConfig] = None) -> SolveReport:
    """
    Refine landmark positions with all poses held fixed.

    Under-constrained landmarks are left untouched and listed in ``skipped_landmarks``.
    Landmarks whose SDF query becomes unobserved are moved to N for good.
    """
    config = config or SolverConfig()
    loss = RobustLoss(config.huber_delta)
    eligible, skipped = _eligible_landmarks(problem)
    if skipped:
        logger.debug(f"Structure refinement skipped {len(skipped)} under-constrained landmarks")
    report = SolveReport(
        stage="structure",
        skipped_landmarks=skipped,
        initial_energy=problem.total_energy(loss),
    )
    if eligible:
        bundle = _BundleRound(problem, [], eligible, loss)
        report.rounds.append(bundle.run("structure", config))
        report.migrated_to_n = sorted(bundle.migrated)
        report.flagged_landmarks = sorted(bundle.flagged)
    _fill_energy(problem, report, loss)
    return report


def window_keyframes(problem: Problem, config: SolverConfig) -> List[int]:
    """Keyframe ids of the optimization window, oldest first."""
    ordered = sorted(problem.keyframes, key=lambda k: (problem.keyframes[k].timestamp, k))
    if config.window_size is not None:
        ordered = ordered[-config.window_size:]
    return ordered


def compute_residuals(problem: Problem, landmark_ids: Optional[Iterable[int]] = None) -> FactorResiduals:
    """
    Whitened squared residuals of active factors.

    Reprojection factors behind the camera report +inf; SDF factors on unobserved voxels
    are omitted.
    """
    ids = set(problem.landmarks) if landmark_ids is None else set(landmark_ids)
    residuals = FactorResiduals()
    keys = [k for k, f in problem.reprojection_factors.items() if f.active and k[0] in ids]
    if keys:
        factors = [problem.reprojection_factors[k] for k in keys]
        poses = [problem.keyframes[k[1]].pose for k in keys]
        r, _, _, valid = reprojection_terms(
            problem.camera,
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
            np.array([problem.landmarks[k[0]].position for k in keys]),
            np.array([f.pixel.vector() for f in factors]),
        )
        weights = np.array([f.weight for f in factors])
        squared = np.where(valid, weights * np.sum(r ** 2, axis=1), np.inf)
        residuals.reprojection = {k: float(s) for k, s in zip(keys, squared)}
    sdf_ids = sorted(
        lid for lid, f in problem.sdf_factors.items() if f.active and lid in ids
    )
    if sdf_ids:
        d, _, _, observed = sdf_terms(
            problem.sdf_map, np.array([problem.landmarks[l].position for l in sdf_ids])
        )
        for lid, dist, obs in zip(sdf_ids, d, observed):
            if obs:
                residuals.sdf[lid] = float(problem.sdf_factors[lid].weight * dist ** 2)
    return residuals


def classify_outliers(
    problem: Problem,
    residuals: FactorResiduals,
    config: Optional[SolverConfig] = None,
    final: bool = True,
) -> Tuple[List[int], List[int]]:
    """
    Chi-squared test with the tolerant occlusion strategy.

    An SDF factor whose whitened squared residual exceeds th_sdf is switched off without
    condemning its landmark. A landmark is an outlier if any of its reprojection factors
    exceeds th_repro, or, when ``final`` is set, if it was seen behind an observing camera
    during the last round. Before the final round a factor behind its camera (+inf) is left
    to the next round instead of condemning the landmark.

    Returns:
        (outlier landmark ids, landmark ids whose SDF factor is to be deactivated)
    """
    config = config or SolverConfig()
    deactivated = sorted(lid for lid, s in residuals.sdf.items() if s > config.th_sdf)
    outliers = {
        lid for (lid, _), s in residuals.reprojection.items()
        if s > config.th_repro and (final or math.isfinite(s))
    }
    involved = set(residuals.sdf) | {lid for lid, _ in residuals.reprojection}
    if final:
        outliers |= {lid for lid in involved if lid in problem.landmarks and problem.landmarks[lid].flagged}
    return sorted(outliers), deactivated


def _fill_energy(problem: Problem, report: SolveReport, loss: RobustLoss) -> None:
    e_repro, e_sdf = problem.energy(loss)
    report.repro_energy = e_repro
    report.sdf_energy = e_sdf
    report.final_energy = e_repro + problem.coupling * e_sdf


def joint_optimize(problem: Problem, config: Optional[SolverConfig] = None) -> SolveReport:
    """
    Jointly refine window poses and landmarks in two robust rounds.

    Round 1 runs to convergence; the chi-squared test then switches off inconsistent SDF
    factors and removes outlier landmarks. Round 2 runs on the cleaned problem and a
    final test dismisses the landmarks that still fail.

    Raises:
        DegenerateProblem: If the window holds fewer than 2 keyframes
        GaugeUnfixed: If no keyframe is fixed and no SDF factor anchors the map frame
    """
    config = config or SolverConfig()
    loss = RobustLoss(config.huber_delta)
    window = window_keyframes(problem, config)
    if len(window) < 2:
        raise DegenerateProblem(f"joint optimization needs 2 keyframes, window has {len(window)}")

    fixed = {k for k in window if problem.keyframes[k].fixed}
    if problem.gauge == GaugeMode.FIXED_KEYFRAME:
        fixed.add(window[0])
    elif not fixed and not any(problem.has_active_sdf(l) for l in problem.sdf_factors):
        raise GaugeUnfixed("no fixed keyframe and no active SDF factor in the problem")
    free_poses = [k for k in window if k not in fixed]
    window_set = set(window)

    report = SolveReport(stage="joint", initial_energy=problem.total_energy(loss))
    migrated, flagged, deactivated_all = [], set(), []

    for round_no in (1, 2):
        landmarks, _ = _eligible_landmarks(problem, window_set)
        bundle = _BundleRound(problem, free_poses, landmarks, loss)
        report.rounds.append(bundle.run(f"joint-{round_no}", config))
        migrated.extend(bundle.migrated)
        flagged |= bundle.flagged

        outliers, deactivated = classify_outliers(
            problem, compute_residuals(problem, landmarks), config, final=round_no == 2
        )
        for lid in deactivated:
            problem.sdf_factors[lid].active = False
        deactivated_all.extend(deactivated)
        for lid in outliers:
            problem.remove_landmark(lid)
        if round_no == 1:
            report.outliers_removed = outliers
        else:
            report.final_outliers = outliers
        logger.info(
            f"Joint round {round_no}: E={report.rounds[-1].final_energy:.6g}, "
            f"{len(outliers)} outliers removed, {len(deactivated)} SDF factors deactivated"
        )

    report.migrated_to_n = sorted(set(migrated))
    report.flagged_landmarks = sorted(flagged)
    report.sdf_deactivated = sorted(set(deactivated_all))
    _fill_energy(problem, report, loss)
    return report
