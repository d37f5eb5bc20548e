"""
Unit tests for the synthetic front-end.
"""
import numpy as np
import pandas as pd
import pytest

from sdfloc.errors import NoVisibleFeatures, TriangulationDegenerate
from sdfloc.frontend_sim import (
    OdometryNoiseModel,
    SyntheticScene,
    Trajectory,
    corrupt_odometry,
    generate_landmark,
    generate_tracks,
    look_at,
    sample_anchors,
    triangulate_local_structure,
    triangulate_midpoint,
)
from sdfloc.geometry import Pose
from sdfloc.optimizer import Membership
from sdfloc.scene import Sphere, scene_distance
from sdfloc.sdf_map import build_from_analytic


class TestScene:
    """Test suite for scene and path generation."""

    def test_anchors_lie_on_surfaces(self, primitives, room_scene):
        """Test that every anchor is on the exposed surface of the room."""
        assert len(room_scene.anchors) == 300
        np.testing.assert_allclose(scene_distance(primitives, room_scene.anchors), 0.0, atol=1e-9)

    def test_anchor_sampling_is_deterministic(self, primitives):
        """Test that the same seed gives the same anchors."""
        a = sample_anchors(primitives, 50, np.random.default_rng(5))
        b = sample_anchors(primitives, 50, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_look_at_points_optical_axis_at_target(self):
        """Test that the camera z axis points from the eye to the target."""
        eye, target = np.array([1.0, 2.0, 1.0]), np.array([-1.0, -1.0, 0.4])
        pose = look_at(eye, target)
        forward = (target - eye) / np.linalg.norm(target - eye)
        np.testing.assert_allclose(pose.rotation[:, 2], forward, atol=1e-12)
        np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)
        assert np.linalg.det(pose.rotation) == pytest.approx(1.0)

    def test_orbit(self, orbit):
        """Test orbit length, timing and radius."""
        assert len(orbit) == 20
        np.testing.assert_allclose(np.diff(orbit.timestamps), 0.1)
        target = np.array([-1.0, -1.0, 0.4])
        horizontal = np.linalg.norm((orbit.positions - target)[:, :2], axis=1)
        np.testing.assert_allclose(horizontal, 2.2)

    def test_trajectory_timestamps_must_increase(self):
        """Test that repeated timestamps are rejected."""
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 0.0]), (Pose.identity(), Pose.identity()))

    def test_velocity_bounds(self, orbit):
        """Test the frame-to-frame motion check."""
        orbit.check_velocity(0.5, 0.5)
        with pytest.raises(ValueError):
            orbit.check_velocity(1e-4, 0.5)


class TestTracks:
    """Test suite for feature track simulation."""

    def test_noise_is_clipped(self, room_scene, orbit, camera, clean_tracks):
        """Test that noisy pixels stay within 4 sigma of the exact projection."""
        noisy = generate_tracks(room_scene, orbit, camera, pixel_sigma=1.0, seed=3)
        assert set(noisy.observations) == set(clean_tracks.observations)
        offsets = np.array([
            noisy.observations[key].vector() - clean_tracks.observations[key].vector()
            for key in clean_tracks.observations
        ])
        assert np.max(np.abs(offsets)) <= 4.0 + 1e-9
        assert 0.5 < np.std(offsets) < 1.5

    def test_deterministic_per_seed(self, room_scene, orbit, camera):
        """Test that the same seed reproduces the same tracks."""
        a = generate_tracks(room_scene, orbit.select([0, 1]), camera, 1.0, seed=9)
        b = generate_tracks(room_scene, orbit.select([0, 1]), camera, 1.0, seed=9)
        assert a.to_dataframe().equals(b.to_dataframe())

    def test_occluded_anchor_is_not_tracked(self, camera):
        """Test that an anchor behind a sphere is never observed."""
        sphere = Sphere((0.0, 0.0, 0.0), 0.5)
        anchors = np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]] + [[0.0, 0.0, 0.5]] * 8)
        scene = SyntheticScene((sphere,), anchors)
        pose = look_at(np.array([0.0, 0.01, 3.0]), np.zeros(3), up=(0.0, 1.0, 0.0))
        tracks = generate_tracks(scene, Trajectory(np.array([0.0]), (pose,)), camera, 0.0, seed=0)
        assert tracks.get(0, 0) is None
        assert tracks.get(1, 0) is not None

    def test_too_few_visible_anchors(self, room_scene, camera):
        """Test that a camera looking at the empty ceiling fails."""
        pose = look_at(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 5.0]), up=(0.0, 1.0, 0.0))
        with pytest.raises(NoVisibleFeatures):
            generate_tracks(room_scene, Trajectory(np.array([0.0]), (pose,)), camera, 1.0, seed=0)

    def test_csv_columns(self, clean_tracks, tmp_path):
        """Test the exported track table layout."""
        path = tmp_path / "tracks.csv"
        clean_tracks.to_csv(path)
        table = pd.read_csv(path)
        assert list(table.columns) == ["landmark_id", "keyframe_id", "u", "v", "level"]
        assert len(table) == len(clean_tracks)

    def test_frame_and_track_views(self, clean_tracks):
        """Test that per-frame and per-anchor views agree with the table."""
        anchor, pixel = next(iter(sorted(clean_tracks.frame(2).items())))
        assert clean_tracks.track(anchor)[2] == pixel
        assert clean_tracks.get(anchor, 2) == pixel


class TestOdometry:
    """Test suite for odometry corruption."""

    def test_scale_only(self, orbit):
        """Test that a pure scale corruption rescales every step exactly."""
        odometry = corrupt_odometry(orbit, OdometryNoiseModel(scale=0.8), seed=0)
        true_steps = np.linalg.norm(np.diff(orbit.positions, axis=0), axis=1)
        odo_steps = np.linalg.norm(np.diff(odometry.positions, axis=0), axis=1)
        np.testing.assert_allclose(odo_steps, 0.8 * true_steps, rtol=1e-9)
        np.testing.assert_allclose(odometry.poses[0].matrix(), orbit.poses[0].matrix())

    def test_noise_accumulates_deterministically(self, orbit):
        """Test that drift grows along the path and repeats per seed."""
        noise = OdometryNoiseModel(translation_sigma=0.005, rotation_sigma=0.002)
        a = corrupt_odometry(orbit, noise, seed=4)
        b = corrupt_odometry(orbit, noise, seed=4)
        np.testing.assert_array_equal(a.positions, b.positions)
        errors = np.linalg.norm(a.positions - orbit.positions, axis=1)
        assert errors[0] == 0.0
        assert errors[-1] > 0.0

    def test_noise_model_validation(self):
        """Test that a non-positive scale is rejected."""
        with pytest.raises(ValueError):
            OdometryNoiseModel(scale=0.0)


class TestTriangulation:
    """Test suite for triangulation and landmark generation."""

    def test_midpoint_of_intersecting_rays(self):
        """Test that two rays meeting at a point recover it."""
        target = np.array([0.3, -0.2, 2.0])
        origins = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        directions = target - origins
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        np.testing.assert_allclose(triangulate_midpoint(origins, directions), target, atol=1e-12)

    def test_parallel_rays(self):
        """Test that parallel rays are degenerate."""
        with pytest.raises(TriangulationDegenerate):
            triangulate_midpoint(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0, 0, 1.0], [0, 0, 1.0]]))

    def test_raycast_landmark_is_metric(self, room_scene, orbit, clean_tracks, camera, room_map):
        """Test that a ray-cast landmark lands on the observed anchor."""
        f = 6
        seen = clean_tracks.frame(f)
        anchor = next(
            a for a in sorted(seen)
            if abs(room_scene.anchors[a][2]) < 1e-9
            and scene_distance(room_scene.primitives[1:], room_scene.anchors[a]) > 0.3
        )
        pixel = seen[anchor]
        keyframes = {k: orbit.poses[k].inverse() for k in (0, f)}
        landmark = generate_landmark(
            room_map, camera, keyframes[f], pixel, clean_tracks, keyframes, anchor
        )
        assert landmark.membership == Membership.M
        assert landmark.id == anchor
        assert np.linalg.norm(landmark.position - room_scene.anchors[anchor]) < 0.02
        assert landmark.depth_sigma is not None and landmark.depth_sigma > 0

    def test_ray_miss_falls_back_to_triangulation(self, room_scene, orbit, clean_tracks, camera):
        """Test N landmarks triangulated outside a map that does not cover them."""
        elsewhere = build_from_analytic(
            [Sphere((10.0, 10.0, 10.0), 0.2)], 0.1, ((9.0, 9.0, 9.0), (11.0, 11.0, 11.0))
        )
        frames = (0, 8, 16)
        shared = set.intersection(*(set(clean_tracks.frame(k)) for k in frames))
        anchor = min(shared)
        keyframes = {k: orbit.poses[k].inverse() for k in frames}
        landmark = generate_landmark(
            elsewhere, camera, keyframes[16], clean_tracks.get(anchor, 16), clean_tracks,
            keyframes, anchor,
        )
        assert landmark.membership == Membership.N
        np.testing.assert_allclose(landmark.position, room_scene.anchors[anchor], atol=1e-6)

    def test_single_view_miss_is_degenerate(self, orbit, clean_tracks, camera):
        """Test that a missed ray with one view cannot produce a landmark."""
        elsewhere = build_from_analytic(
            [Sphere((10.0, 10.0, 10.0), 0.2)], 0.1, ((9.0, 9.0, 9.0), (11.0, 11.0, 11.0))
        )
        anchor, pixel = next(iter(sorted(clean_tracks.frame(0).items())))
        keyframes = {0: orbit.poses[0].inverse()}
        with pytest.raises(TriangulationDegenerate):
            generate_landmark(elsewhere, camera, keyframes[0], pixel, clean_tracks, keyframes, anchor)

    def test_local_structure_with_exact_odometry(self, room_scene, orbit, clean_tracks, camera):
        """Test that two-view structure matches the anchors in camera coordinates."""
        ids, points = triangulate_local_structure(clean_tracks, orbit, 8, 4, camera)
        assert len(ids) >= 8
        expected = orbit.poses[8].inverse().transform(room_scene.anchors[ids])
        np.testing.assert_allclose(points, expected, atol=1e-6)

    def test_local_structure_carries_odometry_scale(self, clean_tracks, orbit, camera):
        """Test that a scaled odometry scales the local structure."""
        scaled = corrupt_odometry(orbit, OdometryNoiseModel(scale=0.5), seed=0)
        ids, exact = triangulate_local_structure(clean_tracks, orbit, 8, 4, camera)
        ids_scaled, half = triangulate_local_structure(clean_tracks, scaled, 8, 4, camera)
        np.testing.assert_array_equal(ids, ids_scaled)
        np.testing.assert_allclose(half, 0.5 * exact, atol=1e-6)
