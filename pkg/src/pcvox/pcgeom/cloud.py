"""Point and voxel cloud containers, Morton ordering and quantization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_DEPTH = 16


def morton_code(coord, depth: int) -> int:
    """Interleave the bits of one integer coordinate, MSB level first.

    At every level the three bits form the child index ``(x << 2) | (y << 1) | z``.
    """
    x, y, z = (int(c) for c in coord)
    limit = 1 << depth
    if not (0 <= x < limit and 0 <= y < limit and 0 <= z < limit):
        raise ValueError(f"coordinate {coord} out of range for depth {depth}")
    code = 0
    for bit in range(depth - 1, -1, -1):
        code = (code << 3) | (((x >> bit) & 1) << 2) | (((y >> bit) & 1) << 1) | ((z >> bit) & 1)
    return code


def morton_codes(coords: np.ndarray, depth: int = MAX_DEPTH) -> np.ndarray:
    """Vectorized :func:`morton_code` for an ``(N, 3)`` integer array."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    codes = np.zeros(len(coords), dtype=np.int64)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    for bit in range(depth - 1, -1, -1):
        codes = (codes << 3) | (((x >> bit) & 1) << 2) | (((y >> bit) & 1) << 1) | ((z >> bit) & 1)
    return codes


def morton_decode(codes: np.ndarray, depth: int = MAX_DEPTH) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((len(codes), 3), dtype=np.int64)
    for bit in range(depth):
        child = (codes >> (3 * bit)) & 7
        out[:, 0] |= ((child >> 2) & 1) << bit
        out[:, 1] |= ((child >> 1) & 1) << bit
        out[:, 2] |= (child & 1) << bit
    return out


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("a point cloud needs at least one point")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class VoxelCloud:
    """Deduplicated integer voxels at ``depth`` bits per axis, Morton sorted.

    Use :meth:`from_coords` for arbitrary input; the constructor only validates.
    """

    depth: int
    coords: np.ndarray

    def __post_init__(self):
        if not 1 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in 1..{MAX_DEPTH}, got {self.depth}")
        c = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if c.size and (c.min() < 0 or c.max() >= (1 << self.depth)):
            raise ValueError(f"voxel coordinates out of range for depth {self.depth}")
        codes = morton_codes(c, self.depth)
        if len(codes) > 1 and np.any(np.diff(codes) <= 0):
            raise ValueError("voxel coordinates must be unique and Morton sorted")
        c.flags.writeable = False
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "_codes", codes)

    @classmethod
    def from_coords(cls, coords, depth: int) -> "VoxelCloud":
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        codes = np.unique(morton_codes(c, depth))
        return cls(depth, morton_decode(codes, depth))

    @property
    def codes(self) -> np.ndarray:
        return self._codes

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, VoxelCloud):
            return NotImplemented
        return self.depth == other.depth and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash((self.depth, self.coords.tobytes()))

    def __repr__(self):
        return f"VoxelCloud(depth={self.depth}, n={len(self)})"


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(pc, scale: float, depth: int) -> VoxelCloud:
    """Scale, round half away from zero, clamp to ``[0, 2^depth - 1]`` and merge duplicates."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(
        pc.coords if isinstance(pc, VoxelCloud) else pc, dtype=np.float64)
    q = round_half_away(np.asarray(pts, dtype=np.float64) * scale)
    q = np.clip(q, 0, (1 << depth) - 1).astype(np.int64)
    return VoxelCloud.from_coords(q, depth)


def dequantize(vc: VoxelCloud, scale: float) -> PointCloud:
    return PointCloud(vc.coords.astype(np.float64) / scale)
