"""
Build the standard room SDF map and write the scene, map and ground-truth trajectory.
"""
import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from sdfloc.config import get_settings
from sdfloc.frontend_sim import ROOM_BOUNDS, make_orbit_trajectory, room_primitives
from sdfloc.pipeline import write_trajectory
from sdfloc.scene import format_scene
from sdfloc.sdf_map import build_from_analytic, save_map


def main(output_dir: str = "data", n_frames: int = 200):
    """Write room.scene, room.sdfm and room_gt.txt to output_dir."""
    settings = get_settings()
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)

    primitives = room_primitives()
    (output / "room.scene").write_text(format_scene(primitives), encoding="utf-8")
    print(f"Scene written ({len(primitives)} primitives)")

    sdf_map = build_from_analytic(
        primitives,
        settings.default_voxel_size,
        ROOM_BOUNDS,
        truncation_distance=settings.truncation_voxels * settings.default_voxel_size,
    )
    save_map(sdf_map, output / "room.sdfm")
    print(f"Map written: {sdf_map}")

    write_trajectory(make_orbit_trajectory(n_frames), output / "room_gt.txt")
    print(f"Ground truth written ({n_frames} frames)")

    print(f"\nRoom data ready in {output.resolve()}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
