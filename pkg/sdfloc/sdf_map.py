"""
Block-hashed signed distance field map.

Voxel (i, j, k) has its center at ``origin + (i, j, k) * voxel_size``. Voxels are grouped
into 16^3 blocks kept in a hash table keyed by integer block coordinate. Distances are
stored as float32 (the on-disk precision) with an observed flag per voxel.

Queries blend the 8 surrounding voxel centers trilinearly. Gradients are precomputed per
voxel by central differences and blended with the same weights, which gives a gradient
field that is continuous across cell boundaries.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from sdfloc.errors import EmptyScene, MapFormatError, Unobserved
from sdfloc.logging_config import get_logger
from sdfloc.scene import Primitive, scene_distance

logger = get_logger("sdf_map")

BLOCK_EDGE = 16
MAGIC = b"SDFM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIddd3dQ")
_BLOCK_COORD = struct.Struct("<3i")
_VOXEL_DTYPE = np.dtype([("distance", "<f4"), ("observed", "u1")])
_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
_LOCAL_GRID = np.stack(
    np.meshgrid(*(np.arange(BLOCK_EDGE),) * 3, indexing="ij"), axis=-1
).reshape(-1, 3)

BlockCoord = Tuple[int, int, int]


@dataclass(eq=False)
class VoxelBlock:
    """16^3 voxels: float32 distances, observed flags and precomputed gradients."""
    coord: BlockCoord
    distances: np.ndarray
    observed: np.ndarray
    gradients: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, coord: BlockCoord) -> "VoxelBlock":
        shape = (BLOCK_EDGE,) * 3
        return cls(coord, np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=bool))


@dataclass(frozen=True, eq=False)
class SdfQuery:
    distance: float
    gradient: np.ndarray


@dataclass(frozen=True, eq=False)
class RayHit:
    depth: float
    point: np.ndarray


class SdfMap:
    """
    Prior map phi: R^3 -> R.

    Immutable after construction; concurrent queries need no locking.
    """

    def __init__(
        self,
        voxel_size: float,
        origin: Sequence[float] = (0.0, 0.0, 0.0),
        sigma_sdf: Optional[float] = None,
        truncation_distance: Optional[float] = None,
        blocks: Optional[Dict[BlockCoord, VoxelBlock]] = None,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.sigma_sdf = float(sigma_sdf) if sigma_sdf is not None else self.voxel_size
        self.truncation_distance = (
            float(truncation_distance) if truncation_distance is not None else 4.0 * self.voxel_size
        )
        if self.sigma_sdf <= 0 or self.truncation_distance <= 0:
            raise ValueError("sigma_sdf and truncation_distance must be positive")
        self.blocks: Dict[BlockCoord, VoxelBlock] = dict(blocks or {})
        self._compute_gradients()
        for block in self.blocks.values():
            for array in (block.distances, block.observed, block.gradients):
                array.setflags(write=False)

    def __repr__(self) -> str:
        return (
            f"SdfMap(voxel_size={self.voxel_size}, blocks={len(self.blocks)}, "
            f"truncation={self.truncation_distance})"
        )

    @property
    def sdf_weight(self) -> float:
        """w_sdf = 1 / sigma_sdf^2."""
        return 1.0 / self.sigma_sdf ** 2

    # ---- addressing ----

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        """Index of the nearest voxel center for each point."""
        scaled = (np.asarray(points, dtype=float) - self.origin) / self.voxel_size
        return np.rint(scaled).astype(np.int64)

    def block_of(self, point: np.ndarray) -> Tuple[BlockCoord, BlockCoord]:
        """(block coordinate, voxel-in-block coordinate) of the voxel containing point."""
        index = self.voxel_index(point)
        block = np.floor_divide(index, BLOCK_EDGE)
        local = index - block * BLOCK_EDGE
        return tuple(int(v) for v in block), tuple(int(v) for v in local)

    def voxel_center(self, block: BlockCoord, voxel: BlockCoord) -> np.ndarray:
        index = np.asarray(block, dtype=np.int64) * BLOCK_EDGE + np.asarray(voxel, dtype=np.int64)
        return self.origin + index * self.voxel_size

    def _gather(self, indices: np.ndarray, with_gradients: bool = True):
        """Distances, gradients and observed flags of integer voxel indices (N,3)."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        n = len(indices)
        distances = np.zeros(n)
        gradients = np.zeros((n, 3))
        observed = np.zeros(n, dtype=bool)
        if n == 0:
            return distances, gradients, observed

        block_coords = np.floor_divide(indices, BLOCK_EDGE)
        local = indices - block_coords * BLOCK_EDGE
        keys, inverse = np.unique(block_coords, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
        for k, key in enumerate(keys):
            block = self.blocks.get((int(key[0]), int(key[1]), int(key[2])))
            if block is None:
                continue
            sel = order[bounds[k]:bounds[k + 1]]
            lx, ly, lz = local[sel, 0], local[sel, 1], local[sel, 2]
            observed[sel] = block.observed[lx, ly, lz]
            distances[sel] = block.distances[lx, ly, lz]
            if with_gradients and block.gradients is not None:
                gradients[sel] = block.gradients[lx, ly, lz]
        return distances, gradients, observed

    def _compute_gradients(self):
        step = self.voxel_size
        for coord, block in self.blocks.items():
            base = np.asarray(coord, dtype=np.int64) * BLOCK_EDGE + _LOCAL_GRID
            d0 = block.distances.reshape(-1).astype(float)
            obs0 = block.observed.reshape(-1)
            grad = np.zeros((len(base), 3))
            for axis in range(3):
                offset = np.zeros(3, dtype=np.int64)
                offset[axis] = 1
                d_plus, _, obs_plus = self._gather(base + offset, with_gradients=False)
                d_minus, _, obs_minus = self._gather(base - offset, with_gradients=False)
                central = obs_plus & obs_minus
                forward = obs_plus & ~obs_minus & obs0
                backward = obs_minus & ~obs_plus & obs0
                g = np.zeros(len(base))
                g[central] = (d_plus - d_minus)[central] / (2.0 * step)
                g[forward] = (d_plus - d0)[forward] / step
                g[backward] = (d0 - d_minus)[backward] / step
                grad[:, axis] = g
            block.gradients = grad.reshape((BLOCK_EDGE,) * 3 + (3,))

    # ---- queries ----

    def interpolate_batch(self, points: np.ndarray):
        """
        Vectorized trilinear query.

        Args:
            points: (N,3) world points

        Returns:
            (distances (N,), gradients (N,3), observed (N,)); unobserved rows are zero
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        scaled = (points - self.origin) / self.voxel_size
        base = np.floor(scaled).astype(np.int64)
        frac = scaled - base
        corners = base[:, None, :] + _CORNERS[None, :, :]
        weights = np.prod(
            np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1
        )
        d, g, obs = self._gather(corners.reshape(-1, 3))
        d = d.reshape(-1, 8)
        g = g.reshape(-1, 8, 3)
        observed = np.all(obs.reshape(-1, 8), axis=1)
        distances = np.where(observed, np.sum(weights * d, axis=1), 0.0)
        gradients = np.where(observed[:, None], np.einsum("nk,nkj->nj", weights, g), 0.0)
        return distances, gradients, observed

    def interpolate(self, point: np.ndarray) -> SdfQuery:
        """
        Trilinear distance and blended gradient at a point.

        Raises:
            Unobserved: If any of the 8 surrounding voxels is unobserved
        """
        d, g, observed = self.interpolate_batch(np.asarray(point, dtype=float)[None, :])
        if not observed[0]:
            raise Unobserved(f"query at {np.asarray(point).tolist()} touches unobserved voxels")
        return SdfQuery(float(d[0]), g[0])

    def raycast(self, origin: np.ndarray, direction: np.ndarray, max_range: float) -> Optional[RayHit]:
        """
        First positive-to-negative zero crossing along a ray.

        The ray is sampled every half voxel from its origin. Leading unobserved samples are
        skipped; once the ray has entered observed space, leaving it ends the search. The
        bracketing samples are refined by regula falsi on the interpolated field.

        Returns:
            RayHit or None when no crossing lies within max_range
        """
        origin = np.asarray(origin, dtype=float)
        direction = np.asarray(direction, dtype=float)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        step = 0.5 * self.voxel_size
        n_steps = int(np.floor(max_range / step + 1e-12))
        if n_steps < 1:
            return None

        ts = np.arange(n_steps + 1) * step
        d, _, observed = self.interpolate_batch(origin + ts[:, None] * direction)
        seen = np.nonzero(observed)[0]
        if len(seen) == 0:
            return None
        first = seen[0]
        gaps = np.nonzero(~observed[first:])[0]
        last = first + gaps[0] - 1 if len(gaps) else n_steps
        crossing = np.nonzero((d[first:last] > 0) & (d[first + 1:last + 1] <= 0))[0]
        if len(crossing) == 0:
            return None

        k = first + crossing[0]
        a, b = ts[k], ts[k + 1]
        da, db = d[k], d[k + 1]
        depth = b
        for _ in range(4):
            depth = a + (b - a) * da / (da - db)
            dt, _, obs = self.interpolate_batch((origin + depth * direction)[None, :])
            if not obs[0] or abs(dt[0]) <= 1e-3 * self.voxel_size:
                break
            if dt[0] > 0:
                a, da = depth, dt[0]
            else:
                b, db = depth, dt[0]
        return RayHit(float(depth), origin + depth * direction)


def interpolate(sdf_map: SdfMap, point: np.ndarray) -> SdfQuery:
    """Trilinear SDF query; raises Unobserved."""
    return sdf_map.interpolate(point)


def raycast_zero_crossing(
    sdf_map: SdfMap, origin: np.ndarray, direction: np.ndarray, max_range: float
) -> Optional[RayHit]:
    """First zero crossing along a unit ray within max_range, or None."""
    return sdf_map.raycast(origin, direction, max_range)


def build_from_analytic(
    primitives: Sequence[Primitive],
    voxel_size: float,
    bounds: Tuple[Sequence[float], Sequence[float]],
    truncation_distance: Optional[float] = None,
    sigma_sdf: Optional[float] = None,
) -> SdfMap:
    """
    Voxelize an analytic scene.

    Every voxel center inside ``bounds`` stores the exact signed distance of the union of
    primitives, clamped to +-truncation_distance, and is marked observed.

    Args:
        primitives: Spheres, boxes and planes
        voxel_size: Edge length of a voxel (meters)
        bounds: (min corner, max corner); the min corner becomes the map origin
        truncation_distance: Clamp distance (default 4 voxels)
        sigma_sdf: Map uncertainty (default voxel_size)

    Raises:
        EmptyScene: If primitives is empty
    """
    if not primitives:
        raise EmptyScene("cannot build a map from an empty scene")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("bounds must be non-empty")
    truncation = truncation_distance if truncation_distance is not None else 4.0 * voxel_size

    last_index = np.ceil((hi - lo) / voxel_size - 1e-9).astype(np.int64)
    n_blocks = last_index // BLOCK_EDGE + 1
    blocks: Dict[BlockCoord, VoxelBlock] = {}
    for coord in itertools.product(*(range(int(n)) for n in n_blocks)):
        index = np.asarray(coord, dtype=np.int64) * BLOCK_EDGE + _LOCAL_GRID
        inside = np.all(index <= last_index, axis=1)
        centers = lo + index * voxel_size
        distances = np.clip(scene_distance(primitives, centers), -truncation, truncation)
        block = VoxelBlock.empty(coord)
        block.distances[...] = np.where(inside, distances, 0.0).reshape(block.distances.shape)
        block.observed[...] = inside.reshape(block.observed.shape)
        blocks[coord] = block

    logger.info(
        f"Built SDF map: {len(blocks)} blocks, voxel_size={voxel_size}, truncation={truncation}"
    )
    return SdfMap(voxel_size, lo, sigma_sdf=sigma_sdf, truncation_distance=truncation, blocks=blocks)


def save_map(sdf_map: SdfMap, path: Union[str, Path]) -> None:
    """
    Write the little-endian binary map format.

    Layout: magic "SDFM", version u32, voxel_size f64, sigma_sdf f64, truncation f64,
    origin 3xf64, block count u64, then per block: coord 3xi32 and 16^3 (f32, u8) pairs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(
            MAGIC, FORMAT_VERSION, sdf_map.voxel_size, sdf_map.sigma_sdf,
            sdf_map.truncation_distance, *sdf_map.origin, len(sdf_map.blocks),
        ))
        for coord in sorted(sdf_map.blocks):
            block = sdf_map.blocks[coord]
            voxels = np.empty(BLOCK_EDGE ** 3, dtype=_VOXEL_DTYPE)
            voxels["distance"] = block.distances.reshape(-1)
            voxels["observed"] = block.observed.reshape(-1)
            f.write(_BLOCK_COORD.pack(*coord))
            f.write(voxels.tobytes())


def load_map(path: Union[str, Path]) -> SdfMap:
    """
    Read a map written by save_map.

    Raises:
        MapFormatError: On a bad magic, unsupported version or truncated file
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MapFormatError(f"{path}: file too short for a map header")
    magic, version, voxel_size, sigma, truncation, ox, oy, oz, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MapFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MapFormatError(f"{path}: unsupported format version {version}")

    block_bytes = BLOCK_EDGE ** 3 * _VOXEL_DTYPE.itemsize
    expected = _HEADER.size + count * (_BLOCK_COORD.size + block_bytes)
    if len(data) != expected:
        raise MapFormatError(f"{path}: expected {expected} bytes, found {len(data)}")

    blocks: Dict[BlockCoord, VoxelBlock] = {}
    offset = _HEADER.size
    shape = (BLOCK_EDGE,) * 3
    for _ in range(count):
        coord = _BLOCK_COORD.unpack_from(data, offset)
        offset += _BLOCK_COORD.size
        voxels = np.frombuffer(data, dtype=_VOXEL_DTYPE, count=BLOCK_EDGE ** 3, offset=offset)
        offset += block_bytes
        blocks[coord] = VoxelBlock(
            coord,
            voxels["distance"].reshape(shape).copy(),
            voxels["observed"].reshape(shape).astype(bool),
        )
    return SdfMap(voxel_size, (ox, oy, oz), sigma_sdf=sigma, truncation_distance=truncation, blocks=blocks)
