"""
Unit tests for the block-hashed SDF map.
"""
import numpy as np
import pytest

from sdfloc.errors import EmptyScene, MapFormatError, Unobserved
from sdfloc.scene import Plane, Sphere, scene_distance
from sdfloc.sdf_map import (
    BLOCK_EDGE,
    build_from_analytic,
    interpolate,
    load_map,
    raycast_zero_crossing,
    save_map,
)



def _face_rays(box, rng, count, margin=0.1, min_cos=0.3):
    """Rays entering the box through a face at least ``margin`` from its edges."""
    origins, directions = [], []
    half = box.half
    while len(origins) < count:
        axis = int(rng.integers(3))
        normal = np.zeros(3)
        normal[axis] = rng.choice((-1.0, 1.0))
        hit = box.center + rng.uniform(-(half - margin), half - margin)
        hit[axis] = box.center[axis] + normal[axis] * half[axis]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        if direction @ normal > -min_cos:
            continue
        origins.append(hit - rng.uniform(0.25, 0.5) * direction)
        directions.append(direction)
    return np.array(origins), np.array(directions)


def _shell_points(rng, count, inner, outer):
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * rng.uniform(inner, outer, size=(count, 1))


class TestBuild:
    """Test suite for voxelizing analytic scenes."""

    def test_block_layout(self, plane_map):
        """Test that a 1 m cube at 5 cm voxels spans 2 blocks per axis."""
        assert BLOCK_EDGE == 16
        assert len(plane_map.blocks) == 8
        assert set(plane_map.blocks) == {(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)}

    def test_storage_is_float32(self, plane_map):
        """Test that voxel distances are stored in single precision."""
        block = next(iter(plane_map.blocks.values()))
        assert block.distances.dtype == np.float32

    def test_distances_are_clamped(self, plane_map):
        """Test that stored distances stay within the truncation band."""
        limit = plane_map.truncation_distance
        for block in plane_map.blocks.values():
            assert np.all(np.abs(block.distances) <= limit + 1e-6)

    def test_defaults(self, plane_map):
        """Test default truncation (4 voxels) and map uncertainty (1 voxel)."""
        assert plane_map.truncation_distance == pytest.approx(0.2)
        assert plane_map.sigma_sdf == pytest.approx(0.05)
        assert plane_map.sdf_weight == pytest.approx(400.0)

    def test_empty_scene(self):
        """Test that an empty scene cannot be voxelized."""
        with pytest.raises(EmptyScene):
            build_from_analytic([], 0.05, ((0, 0, 0), (1, 1, 1)))

    def test_invalid_bounds(self):
        """Test that inverted bounds are rejected."""
        with pytest.raises(ValueError):
            build_from_analytic([Plane((0, 0, 1), 0)], 0.05, ((0, 0, 0), (1, -1, 1)))

    def test_point_to_voxel_addressing(self, room_map, rng):
        """Test that point -> (block, voxel) -> center lands within half a voxel diagonal."""
        limit = room_map.voxel_size * np.sqrt(3) / 2 + 1e-12
        points = rng.uniform((-2.0, -2.0, 0.0), (2.0, 2.0, 2.3), size=(1000, 3))
        for point in points:
            block, voxel = room_map.block_of(point)
            assert all(0 <= v < BLOCK_EDGE for v in voxel)
            center = room_map.voxel_center(block, voxel)
            assert np.linalg.norm(center - point) <= limit
            assert room_map.block_of(center) == (block, voxel)

    def test_nearest_voxel_index_for_many_points(self, room_map, rng):
        """Test the vectorized nearest-voxel lookup over a million points."""
        points = rng.uniform((-2.2, -2.2, -0.2), (2.2, 2.2, 2.5), size=(1_000_000, 3))
        centers = room_map.origin + room_map.voxel_index(points) * room_map.voxel_size
        distance = np.linalg.norm(centers - points, axis=1)
        assert np.max(distance) <= room_map.voxel_size * np.sqrt(3) / 2 + 1e-12

    def test_stored_value_is_clamped_scene_distance(self, room_map, primitives):
        """Test that an addressed voxel stores the clamped analytic distance."""
        block, voxel = room_map.block_of(np.array([0.8, 0.8, 0.1]))
        center = room_map.voxel_center(block, voxel)
        exact = np.clip(scene_distance(primitives, center[None, :])[0], -0.5, 0.5)
        assert room_map.blocks[block].distances[voxel] == np.float32(exact)


class TestInterpolation:
    """Test suite for trilinear queries."""

    def test_linear_field_is_exact(self, plane_map):
        """Test that a planar field is reproduced with its gradient."""
        query = interpolate(plane_map, np.array([0.013, -0.071, 0.07]))
        assert query.distance == pytest.approx(0.07, abs=1e-6)
        np.testing.assert_allclose(query.gradient, [0.0, 0.0, 1.0], atol=1e-5)

    def test_outside_bounds_is_unobserved(self, plane_map):
        """Test that queries beyond the built region raise."""
        with pytest.raises(Unobserved):
            plane_map.interpolate(np.array([0.0, 0.0, 0.9]))

    def test_batch_flags_unobserved(self, plane_map):
        """Test that batch queries report unobserved rows as zeros."""
        d, g, observed = plane_map.interpolate_batch(np.array([[0.0, 0.0, 0.1], [3.0, 0.0, 0.0]]))
        assert observed.tolist() == [True, False]
        assert d[1] == 0.0 and np.all(g[1] == 0.0)

    def test_curved_surface_error_below_voxel(self, room_map, primitives, rng):
        """Test interpolation error near the room's surfaces."""
        points = rng.uniform((-1.8, -1.8, 0.05), (1.8, 1.8, 1.5), size=(500, 3))
        exact = scene_distance(primitives, points)
        near = np.abs(exact) < 0.3
        d, _, observed = room_map.interpolate_batch(points[near])
        assert np.all(observed)
        assert np.max(np.abs(d - exact[near])) < room_map.voxel_size

    def test_unit_sphere_error_within_curvature_bound(self, sphere_map, rng):
        """Test 1000 queries in 0.3 <= |p| <= 1.7 against the exact sphere distance."""
        points = _shell_points(rng, 1000, 0.3, 1.7)
        d, _, observed = sphere_map.interpolate_batch(points)
        assert np.all(observed)
        error = np.abs(d - (np.linalg.norm(points, axis=1) - 1.0))
        # Trilinear error is at most h^2/8 times the Laplacian bound 2/r over the cell.
        h = sphere_map.voxel_size
        bound = 1.5 * h ** 2 / 8 * 2 / (0.3 - h * np.sqrt(3) / 2)
        assert np.max(error) <= bound

    def test_voxel_center_returns_stored_value(self, sphere_map):
        """Test that a query at a voxel center collapses to that voxel's distance."""
        for point in ([0.5, 0.2, -0.3], [1.2, -0.4, 0.05], [-0.1, -0.9, 0.6]):
            block, voxel = sphere_map.block_of(np.array(point))
            center = sphere_map.voxel_center(block, voxel)
            stored = float(sphere_map.blocks[block].distances[voxel])
            assert sphere_map.interpolate(center).distance == pytest.approx(stored, abs=1e-9)

    def test_gradient_matches_finite_differences_inside_cell(self, sphere_map, rng):
        """Test the blended gradient against differences of the interpolant at cell centers."""
        h = sphere_map.voxel_size
        cells = np.floor((_shell_points(rng, 100, 0.8, 1.2) - sphere_map.origin) / h)
        centers = sphere_map.origin + (cells + 0.5) * h
        eps = 1e-5 * h
        for center in centers:
            numeric = np.array([
                (sphere_map.interpolate(center + eps * e).distance
                 - sphere_map.interpolate(center - eps * e).distance) / (2 * eps)
                for e in np.eye(3)
            ])
            np.testing.assert_allclose(sphere_map.interpolate(center).gradient, numeric, atol=5e-3)

    def test_gradient_is_continuous_across_cells(self):
        """Test that the blended gradient does not jump at a cell boundary."""
        sdf_map = build_from_analytic(
            [Sphere((0.0, 0.0, 0.0), 0.3)], 0.05, ((-0.6, -0.6, -0.6), (0.6, 0.6, 0.6)),
            truncation_distance=0.5,
        )
        boundary = sdf_map.origin[0] + 13 * sdf_map.voxel_size
        below = sdf_map.interpolate(np.array([boundary - 1e-7, 0.02, 0.03])).gradient
        above = sdf_map.interpolate(np.array([boundary + 1e-7, 0.02, 0.03])).gradient
        np.testing.assert_allclose(below, above, atol=1e-4)


class TestRaycast:
    """Test suite for zero-crossing search."""

    def test_hit_on_plane(self, plane_map):
        """Test that a downward ray finds the plane."""
        hit = raycast_zero_crossing(plane_map, np.array([0.1, 0.1, 0.4]), np.array([0.0, 0.0, -1.0]), 2.0)
        assert hit is not None
        assert hit.depth == pytest.approx(0.4, abs=1e-4)
        np.testing.assert_allclose(hit.point, [0.1, 0.1, 0.0], atol=1e-4)

    def test_slanted_hit_on_sphere(self, room_map):
        """Test a hit on the room's sphere against the analytic intersection."""
        sphere = Sphere((-0.9, -0.9, 0.35), 0.35)
        origin = np.array([0.5, 0.5, 1.0])
        direction = sphere.center - origin
        direction /= np.linalg.norm(direction)
        hit = room_map.raycast(origin, direction, 5.0)
        assert hit is not None
        assert hit.depth == pytest.approx(sphere.intersect(origin, direction), abs=0.02)

    def test_rays_into_box_hit_surface(self, box, box_map, rng):
        """Test 500 rays into a box against the exact ray-box intersection."""
        origins, directions = _face_rays(box, rng, 500)
        for origin, direction in zip(origins, directions):
            hit = box_map.raycast(origin, direction, 2.0)
            assert hit is not None
            assert abs(box_map.interpolate(hit.point).distance) <= 0.1 * box_map.voxel_size
            assert hit.depth == pytest.approx(box.intersect(origin, direction), abs=box_map.voxel_size)

    def test_shorter_range_never_hits_farther(self, box, box_map, rng):
        """Test that shrinking max_range keeps the hit or loses it, never moves it out."""
        origins, directions = _face_rays(box, rng, 50)
        for origin, direction in zip(origins, directions):
            hits = [box_map.raycast(origin, direction, r) for r in (2.0, 1.0, 0.6, 0.45, 0.3, 0.1)]
            found = [h.depth for h in hits if h is not None]
            assert found == sorted(found, reverse=True)
            assert all(h is None for h in hits[len(found):])

    def test_miss_returns_none(self, plane_map):
        """Test that an upward ray finds nothing."""
        assert plane_map.raycast(np.array([0.0, 0.0, 0.1]), np.array([0.0, 0.0, 1.0]), 2.0) is None

    def test_range_limit(self, plane_map):
        """Test that crossings beyond max_range are ignored."""
        assert plane_map.raycast(np.array([0.0, 0.0, 0.4]), np.array([0.0, 0.0, -1.0]), 0.2) is None

    def test_direction_must_be_unit(self, plane_map):
        """Test that non-unit directions are rejected."""
        with pytest.raises(ValueError):
            plane_map.raycast(np.zeros(3), np.array([0.0, 0.0, -2.0]), 1.0)


class TestMapFiles:
    """Test suite for the binary map format."""

    def test_save_and_load_preserve_queries(self, plane_map, tmp_path):
        """Test that a reloaded map answers queries identically."""
        path = tmp_path / "plane.sdfm"
        save_map(plane_map, path)
        loaded = load_map(path)
        assert loaded.voxel_size == plane_map.voxel_size
        assert loaded.truncation_distance == plane_map.truncation_distance
        assert set(loaded.blocks) == set(plane_map.blocks)
        point = np.array([0.21, -0.13, 0.04])
        assert loaded.interpolate(point).distance == plane_map.interpolate(point).distance

    def test_round_trip_is_bit_exact(self, room_map, tmp_path):
        """Test that every stored distance and observed flag survives unchanged."""
        path = tmp_path / "room.sdfm"
        save_map(room_map, path)
        loaded = load_map(path)
        assert set(loaded.blocks) == set(room_map.blocks)
        for coord, block in room_map.blocks.items():
            assert loaded.blocks[coord].distances.tobytes() == block.distances.tobytes()
            np.testing.assert_array_equal(loaded.blocks[coord].observed, block.observed)
        np.testing.assert_array_equal(loaded.origin, room_map.origin)

    def test_bad_magic(self, plane_map, tmp_path):
        """Test that a foreign file is rejected."""
        path = tmp_path / "bad.sdfm"
        save_map(plane_map, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(MapFormatError, match="magic"):
            load_map(path)

    def test_truncated_file(self, plane_map, tmp_path):
        """Test that a cut-off file is rejected."""
        path = tmp_path / "short.sdfm"
        save_map(plane_map, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(MapFormatError):
            load_map(path)
