"""
Analytic scene primitives: exact signed distances and ray intersections.

Scene files are plain text, one primitive per line (units meters, '#' comments):

    sphere cx cy cz r
    box cx cy cz sx sy sz      # center and full edge lengths, axis-aligned
    plane nx ny nz d           # points p with n.p = d; positive on the normal side
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from sdfloc.errors import ConfigError, EmptyScene

_RAY_EPSILON = 1e-12


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(points, dtype=float) - self.center, axis=-1) - self.radius

    def intersect(self, origin: np.ndarray, direction: np.ndarray) -> Optional[float]:
        oc = origin - self.center
        b = float(oc @ direction)
        c = float(oc @ oc) - self.radius ** 2
        disc = b * b - c
        if disc < 0:
            return None
        root = np.sqrt(disc)
        for t in (-b - root, -b + root):
            if t > _RAY_EPSILON:
                return float(t)
        return None

    def to_line(self) -> str:
        return "sphere {:.9g} {:.9g} {:.9g} {:.9g}".format(*self.center, self.radius)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box given by its center and full edge lengths."""
    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=float).reshape(3))
        if np.any(self.size <= 0):
            raise ValueError("box edge lengths must be positive")

    @property
    def half(self) -> np.ndarray:
        return self.size / 2.0

    def distance(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(np.asarray(points, dtype=float) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def intersect(self, origin: np.ndarray, direction: np.ndarray) -> Optional[float]:
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / direction
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        # Axis-parallel rays: inside the slab -> unbounded, outside -> no hit
        parallel = np.abs(direction) < _RAY_EPSILON
        inside_slab = (origin >= lo) & (origin <= hi)
        t_min = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        t_max = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = float(np.max(t_min))
        t_far = float(np.min(t_max))
        if t_near > t_far or t_far <= _RAY_EPSILON:
            return None
        return t_near if t_near > _RAY_EPSILON else t_far

    def to_line(self) -> str:
        return "box {:.9g} {:.9g} {:.9g} {:.9g} {:.9g} {:.9g}".format(*self.center, *self.size)


@dataclass(frozen=True, eq=False)
class Plane:
    """Half-space boundary n.p = d with unit normal n; negative behind the plane."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(normal)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", normal / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def intersect(self, origin: np.ndarray, direction: np.ndarray) -> Optional[float]:
        denom = float(self.normal @ direction)
        if abs(denom) < _RAY_EPSILON:
            return None
        t = (self.offset - float(self.normal @ origin)) / denom
        return float(t) if t > _RAY_EPSILON else None

    def to_line(self) -> str:
        return "plane {:.9g} {:.9g} {:.9g} {:.9g}".format(*self.normal, self.offset)


Primitive = Union[Sphere, Box, Plane]


def scene_distance(primitives: Sequence[Primitive], points: np.ndarray) -> np.ndarray:
    """
    Exact signed distance of the union (minimum over primitives).

    Raises:
        EmptyScene: If no primitives are given
    """
    if not primitives:
        raise EmptyScene("scene has no primitives")
    points = np.asarray(points, dtype=float)
    return np.min(np.stack([p.distance(points) for p in primitives]), axis=0)


def ray_intersect(
    primitives: Sequence[Primitive], origin: np.ndarray, direction: np.ndarray
) -> Optional[float]:
    """Distance along a unit ray to the first primitive surface, or None."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    hits = [t for t in (p.intersect(origin, direction) for p in primitives) if t is not None]
    return min(hits) if hits else None


def scene_bounds(
    primitives: Sequence[Primitive], margin: float
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """
    Axis-aligned box around the scene, grown by ``margin`` on every side.

    Spheres and boxes contribute their extents. Planes are unbounded, so each one
    contributes the foot of the perpendicular from the center of the bounded part (the
    origin when the scene holds only planes).

    Raises:
        EmptyScene: If no primitives are given
    """
    if not primitives:
        raise EmptyScene("scene has no primitives")
    corners = []
    for p in primitives:
        if isinstance(p, Sphere):
            corners += [p.center - p.radius, p.center + p.radius]
        elif isinstance(p, Box):
            corners += [p.center - p.half, p.center + p.half]
    anchor = (np.min(corners, axis=0) + np.max(corners, axis=0)) / 2 if corners else np.zeros(3)
    for p in primitives:
        if isinstance(p, Plane):
            corners.append(anchor - p.distance(anchor) * p.normal)
    corners = np.array(corners)
    lower = np.min(corners, axis=0) - margin
    upper = np.max(corners, axis=0) + margin
    return tuple(float(v) for v in lower), tuple(float(v) for v in upper)


def parse_scene(text: str) -> List[Primitive]:
    """
    Parse a scene description.

    Raises:
        ConfigError: On unknown primitive kinds or wrong argument counts
        EmptyScene: If the description holds no primitives
    """
    arity = {"sphere": 4, "box": 6, "plane": 4}
    primitives: List[Primitive] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        kind = kind.lower()
        if kind not in arity:
            raise ConfigError(f"line {lineno}: unknown primitive {kind!r}")
        if len(args) != arity[kind]:
            raise ConfigError(f"line {lineno}: {kind} takes {arity[kind]} numbers, got {len(args)}")
        try:
            values = [float(a) for a in args]
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from e
        if kind == "sphere":
            primitives.append(Sphere(values[:3], values[3]))
        elif kind == "box":
            primitives.append(Box(values[:3], values[3:]))
        else:
            primitives.append(Plane(values[:3], values[3]))
    if not primitives:
        raise EmptyScene("scene description holds no primitives")
    return primitives


def load_scene(path: Union[str, Path]) -> List[Primitive]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scene file not found: {path}")
    return parse_scene(path.read_text(encoding="utf-8"))


def format_scene(primitives: Sequence[Primitive]) -> str:
    return "\n".join(p.to_line() for p in primitives) + "\n"
