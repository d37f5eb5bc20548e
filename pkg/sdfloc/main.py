"""
Command-line interface: build-map, run, evaluate and sweep.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 convergence failure in
strict mode.
"""
from enum import Enum
from pathlib import Path
from typing import List, NoReturn, Optional

import typer

from sdfloc.config import get_settings
from sdfloc.errors import ConfigError, NotConverged, SdfLocError
from sdfloc.frontend_sim import ROOM_BOUNDS, room_primitives
from sdfloc.logging_config import get_logger, setup_logging
from sdfloc.metrics import Alignment, compute_ate
from sdfloc.pipeline import (
    PERTURBATION_AXES,
    PipelineConfig,
    load_pipeline_config,
    perturbation_sweep,
    read_trajectory,
    run_localization,
)
from sdfloc.scene import format_scene, load_scene, scene_bounds
from sdfloc.sdf_map import build_from_analytic, save_map

logger = get_logger("cli")
settings = get_settings()

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3

app = typer.Typer(help="Metric localization of a camera against a signed distance field map.")


class AlignChoice(str, Enum):
    none = "none"
    rigid = "rigid"
    similarity = "similarity"


@app.callback()
def main(log_level: str = typer.Option(settings.log_level, "--log-level", help="Logging level")):
    setup_logging(log_level)


def _fail(error: Exception) -> NoReturn:
    code = EXIT_FAILURE
    if isinstance(error, ConfigError):
        code = EXIT_CONFIG
    elif isinstance(error, NotConverged):
        code = EXIT_NOT_CONVERGED
    typer.echo(f"Error: {error}", err=True)
    raise typer.Exit(code)


def _pipeline_config(
    config: Optional[Path],
    seed: Optional[int],
    coupling: Optional[float],
    output: Optional[Path],
    align: Optional[AlignChoice],
    strict: bool,
) -> PipelineConfig:
    overrides = {
        "seed": seed,
        "output_dir": str(output) if output else None,
        "alignment": align.value if align else None,
        "strict": True if strict else None,
    }
    if config is not None:
        pipeline = load_pipeline_config(config, **overrides)
    else:
        try:
            pipeline = PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if coupling is not None:
        if coupling < 0:
            raise ConfigError("--lambda must be non-negative")
        pipeline.solver = pipeline.solver.model_copy(update={"coupling": coupling})
    return pipeline


@app.command("build-map")
def build_map(
    output: Path = typer.Option(..., "--output", "-o", help="Map file to write"),
    scene: Optional[Path] = typer.Option(None, "--scene", help="Scene file (default: standard room)"),
    voxel_size: float = typer.Option(settings.default_voxel_size, "--voxel-size"),
    truncation: Optional[float] = typer.Option(None, "--truncation", help="Clamp distance (m)"),
    scene_output: Optional[Path] = typer.Option(None, "--scene-output", help="Also write the scene file"),
):
    """Voxelize an analytic scene into an SDF map file."""
    try:
        truncation = truncation or settings.truncation_voxels * voxel_size
        if scene is None:
            primitives, bounds = room_primitives(), ROOM_BOUNDS
        else:
            primitives = load_scene(scene)
            bounds = scene_bounds(primitives, truncation + voxel_size)
        sdf_map = build_from_analytic(primitives, voxel_size, bounds, truncation_distance=truncation)
        save_map(sdf_map, output)
        if scene_output is not None:
            scene_output.write_text(format_scene(primitives), encoding="utf-8")
    except SdfLocError as e:
        _fail(e)
    except ValueError as e:
        _fail(ConfigError(str(e)))
    typer.echo(f"Wrote {output} ({len(sdf_map.blocks)} blocks)")


@app.command()
def run(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Pipeline YAML"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    coupling: Optional[float] = typer.Option(None, "--lambda", help="Coupling factor"),
    output: Optional[Path] = typer.Option(None, "--output", "-o", help="Output directory"),
    align: Optional[AlignChoice] = typer.Option(None, "--align"),
    strict: bool = typer.Option(False, "--strict", help="Fail when a keyframe does not converge"),
):
    """Localize a synthetic sequence and write the trajectory and report."""
    try:
        pipeline = _pipeline_config(config, seed, coupling, output, align, strict)
        report = run_localization(pipeline)
    except SdfLocError as e:
        _fail(e)
    typer.echo(report.to_text(), nl=False)
    typer.echo(f"Outputs written to {pipeline.output_dir}")


@app.command()
def evaluate(
    estimated: Path = typer.Argument(..., help="Estimated trajectory"),
    ground_truth: Path = typer.Argument(..., help="Ground-truth trajectory"),
    align: AlignChoice = typer.Option(AlignChoice.none, "--align"),
):
    """ATE between two trajectory files."""
    try:
        t_rmse, r_rmse, frames = compute_ate(
            read_trajectory(estimated), read_trajectory(ground_truth), Alignment(align.value)
        )
    except SdfLocError as e:
        _fail(e)
    typer.echo(f"frames: {len(frames)}")
    typer.echo(f"ATE translation RMSE: {t_rmse:.6f} m")
    typer.echo(f"ATE rotation RMSE: {r_rmse:.6f} deg")


@app.command()
def sweep(
    axis: str = typer.Option("x", "--axis", help=f"One of {', '.join(PERTURBATION_AXES)}"),
    magnitudes: str = typer.Option("0,0.1,0.25,0.5", "--magnitudes", help="Comma-separated offsets"),
    seeds: int = typer.Option(10, "--seeds", help="Seeds per magnitude"),
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    seed: Optional[int] = typer.Option(None, "--seed", help="First seed"),
    coupling: Optional[float] = typer.Option(None, "--lambda"),
    output: Path = typer.Option(Path("sweep.csv"), "--output", "-o", help="CSV to write"),
):
    """Perturb the initial pose along one axis and record ATE per magnitude and seed."""
    try:
        pipeline = _pipeline_config(config, seed, coupling, None, None, False)
        try:
            values: List[float] = [float(v) for v in magnitudes.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"--magnitudes: {e}") from e
        if axis not in PERTURBATION_AXES:
            raise ConfigError(f"unknown axis {axis!r}. Available: {list(PERTURBATION_AXES)}")
        if not values:
            raise ConfigError("--magnitudes must list at least one value")
        cells = perturbation_sweep(
            pipeline, axis, values, range(pipeline.seed, pipeline.seed + seeds), output,
            show_progress=True,
        )
    except SdfLocError as e:
        _fail(e)
    failed = sum(1 for c in cells if not c.converged)
    typer.echo(f"Wrote {output}: {len(cells)} cells, {failed} not converged")


if __name__ == "__main__":
    app()
