"""
Centralized configuration management for the SDF localization toolkit.

Uses pydantic-settings for type-safe process settings with environment variable support,
and pydantic models for the solver configuration, which is also loadable from a plain
key=value file.
"""
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from sdfloc.errors import ConfigError


class Settings(BaseSettings):
    """Process settings with environment variable support (prefix SDFLOC_)."""

    model_config = SettingsConfigDict(
        env_prefix="SDFLOC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = "INFO"

    # Map defaults
    default_voxel_size: float = 0.05  # meters
    truncation_voxels: float = 4.0  # truncation distance in voxels

    # Coupling factor: 1.0 for indoor scenes, 10.0 for large outdoor scenes
    default_coupling: float = 1.0

    # Output
    output_dir: str = "output"
    strict: bool = False


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """
    Get process settings.

    Returns:
        Settings instance
    """
    return settings


def reload_settings():
    """Reload settings from environment (useful for testing)."""
    global settings
    settings = Settings()


class SolverConfig(BaseModel):
    """
    Levenberg-Marquardt configuration shared by pose, structure and joint solves.

    Damping follows H + beta*I with a Marquardt schedule; the chi-squared thresholds
    are applied to whitened squared residuals (1 DoF for SDF, 2 DoF for reprojection).
    """

    coupling: float = Field(1.0, ge=0.0, alias="lambda", description="Coupling factor lambda")
    max_iterations: int = Field(20, gt=0)
    beta0: float = Field(1e-4, gt=0.0)
    beta_up: float = Field(10.0, gt=1.0)
    beta_down: float = Field(0.5, gt=0.0, lt=1.0)
    beta_min: float = Field(1e-12, gt=0.0)
    beta_max: float = Field(1e6, gt=0.0)
    energy_tolerance: float = Field(1e-8, gt=0.0)
    step_tolerance: float = Field(1e-10, gt=0.0)
    th_sdf: float = Field(3.841, gt=0.0)
    th_repro: float = Field(5.991, gt=0.0)
    huber_delta: float = Field(1.345, gt=0.0)
    window_size: Optional[int] = Field(None, gt=1, description="None = all keyframes")
    min_pose_landmarks: int = Field(6, ge=6)

    model_config = {"populate_by_name": True, "extra": "forbid"}

    @model_validator(mode="after")
    def _check_damping_range(self):
        if not self.beta_min <= self.beta0 <= self.beta_max:
            raise ValueError("beta0 must lie within [beta_min, beta_max]")
        return self


# key=value names accepted in solver config files
_SOLVER_KEYS = {
    "lambda": "coupling",
    "coupling": "coupling",
    "beta0": "beta0",
    "beta_up": "beta_up",
    "beta_down": "beta_down",
    "max_iterations": "max_iterations",
    "th_sdf": "th_sdf",
    "th_repro": "th_repro",
    "huber_delta": "huber_delta",
    "energy_tolerance": "energy_tolerance",
    "step_tolerance": "step_tolerance",
    "window_size": "window_size",
}


def parse_solver_config(text: str) -> SolverConfig:
    """
    Parse a key=value solver configuration.

    Blank lines and '#' comments are ignored. Unknown keys are rejected.

    Args:
        text: File contents

    Returns:
        Validated SolverConfig

    Raises:
        ConfigError: On malformed lines, unknown keys or invalid values
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SOLVER_KEYS:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r}. Available: {sorted(set(_SOLVER_KEYS))}"
            )
        values[_SOLVER_KEYS[key]] = None if value.lower() == "none" else value

    try:
        return SolverConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid solver configuration: {e}") from e


def load_solver_config(path: Union[str, Path]) -> SolverConfig:
    """Load a SolverConfig from a key=value file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"solver config not found: {path}")
    return parse_solver_config(path.read_text(encoding="utf-8"))
