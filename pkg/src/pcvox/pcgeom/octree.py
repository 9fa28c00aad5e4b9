"""Octree construction from voxel clouds and its inverse."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..errors import IntegrityError
from .cloud import VoxelCloud, morton_decode


@dataclass(frozen=True, eq=False)
class OctreeLevel:
    """One breadth-first level: parents at ``level`` bits and their occupancy bytes."""

    codes: np.ndarray  # Morton codes of the parents, sorted
    occupancy: np.ndarray  # uint8, bit i set iff child i is occupied

    @property
    def coords(self) -> np.ndarray:
        return morton_decode(self.codes)

    def __len__(self):
        return len(self.codes)


@dataclass(frozen=True, eq=False)
class OctreeLevels:
    """Levels are indexed root first; level ``l`` holds parents with ``l``-bit coordinates."""

    depth: int
    levels: List[OctreeLevel]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, idx):
        return self.levels[idx]

    def child_codes(self, idx: int) -> np.ndarray:
        return expand_children(self.levels[idx].codes, self.levels[idx].occupancy)


def expand_children(parent_codes: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """Morton codes of all occupied children, in Morton order."""
    occupancy = np.asarray(occupancy, dtype=np.uint8)
    bits = np.unpackbits(occupancy[:, None], axis=1, bitorder="little").astype(bool)
    child = (np.asarray(parent_codes, dtype=np.int64)[:, None] << 3) | np.arange(8, dtype=np.int64)
    return child[bits]


def group_children(child_codes: np.ndarray):
    """Split sorted child codes into (parent codes, occupancy bytes)."""
    parents = child_codes >> 3
    starts = np.flatnonzero(np.r_[True, parents[1:] != parents[:-1]])
    bits = (np.ones(len(child_codes), dtype=np.uint8) << (child_codes & 7).astype(np.uint8))
    occ = np.bitwise_or.reduceat(bits, starts) if len(child_codes) else np.zeros(0, np.uint8)
    return parents[starts], occ.astype(np.uint8)


def build_octree(vc: VoxelCloud) -> OctreeLevels:
    d = vc.depth
    levels = [None] * d
    codes = vc.codes
    for lvl in range(d - 1, -1, -1):
        parents, occ = group_children(codes)
        levels[lvl] = OctreeLevel(parents, occ)
        codes = parents
    return OctreeLevels(d, levels)


def flatten_octree(tree: OctreeLevels) -> VoxelCloud:
    expected = np.zeros(1, dtype=np.int64)
    for lvl, level in enumerate(tree.levels):
        if not np.array_equal(level.codes, expected):
            raise IntegrityError(f"level {lvl} parents do not match the children of level {lvl - 1}")
        if len(level.occupancy) != len(level.codes) or np.any(level.occupancy == 0):
            raise IntegrityError(f"level {lvl} has an empty or missing occupancy byte")
        expected = expand_children(level.codes, level.occupancy)
    return VoxelCloud(tree.depth, morton_decode(expected, tree.depth))


__all__ = [
    "OctreeLevel",
    "OctreeLevels",
    "build_octree",
    "flatten_octree",
    "expand_children",
    "group_children",
]
