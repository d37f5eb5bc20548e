"""
Pytest configuration and fixtures for testing the SDF localization toolkit.
"""
import numpy as np
import pytest

from sdfloc.frontend_sim import (
    ROOM_BOUNDS,
    default_camera,
    generate_tracks,
    make_orbit_trajectory,
    make_room_scene,
    room_primitives,
)
from sdfloc.scene import Box, Plane, Sphere
from sdfloc.sdf_map import build_from_analytic


@pytest.fixture(scope="session")
def camera():
    """Standard 640x480 pinhole camera."""
    return default_camera()


@pytest.fixture(scope="session")
def primitives():
    """Primitives of the standard room."""
    return room_primitives()


@pytest.fixture(scope="session")
def room_map(primitives):
    """Room SDF at 5 cm voxels with a 0.5 m truncation band."""
    return build_from_analytic(primitives, 0.05, ROOM_BOUNDS, truncation_distance=0.5)


@pytest.fixture(scope="session")
def padded_room_map(primitives):
    """Room SDF with 0.6 m of extra observed space around the standard bounds."""
    lower, upper = (np.asarray(b, dtype=float) for b in ROOM_BOUNDS)
    return build_from_analytic(primitives, 0.05, (lower - 0.6, upper + 0.6), truncation_distance=0.5)


@pytest.fixture(scope="session")
def plane_map():
    """SDF of the plane z = 0 inside a 1 m cube around the origin."""
    return build_from_analytic(
        [Plane((0.0, 0.0, 1.0), 0.0)], 0.05, ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    )


@pytest.fixture(scope="session")
def sphere_map():
    """Unit sphere at the origin, 5 cm voxels, 1 m truncation band."""
    return build_from_analytic(
        [Sphere((0.0, 0.0, 0.0), 1.0)], 0.05, ((-1.9, -1.9, -1.9), (1.9, 1.9, 1.9)),
        truncation_distance=1.0,
    )


@pytest.fixture(scope="session")
def box():
    """Axis-aligned box used by the ray tests."""
    return Box((0.0, 0.0, 0.0), (0.6, 0.8, 0.5))


@pytest.fixture(scope="session")
def box_map(box):
    """SDF of the box at 5 cm voxels inside a 3 m cube."""
    return build_from_analytic([box], 0.05, ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)))


@pytest.fixture(scope="session")
def room_scene():
    """Room scene with 300 anchors."""
    return make_room_scene(seed=0, anchor_count=300)


@pytest.fixture(scope="session")
def orbit():
    """20-frame orbit around the room's objects."""
    return make_orbit_trajectory(20)


@pytest.fixture(scope="session")
def clean_tracks(room_scene, orbit, camera):
    """Noise-free tracks of the room scene along the orbit."""
    return generate_tracks(room_scene, orbit, camera, pixel_sigma=0.0, seed=0)


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def restore_settings():
    """Reload process settings after a test that changes the environment."""
    from sdfloc.config import reload_settings

    yield
    reload_settings()
