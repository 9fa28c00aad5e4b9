"""Geometry types, PLY I/O, voxelization, octrees and distortion metrics."""

from .cloud import PointCloud, VoxelCloud, dequantize, morton_code, morton_codes, morton_decode, quantize
from .metrics import DistortionReport, d1_psnr, d2_psnr, estimate_normals, psnr_from_mse
from .octree import OctreeLevel, OctreeLevels, build_octree, expand_children, flatten_octree, group_children
from .ply import read_ply, read_voxels, write_ply

__all__ = [
    "PointCloud", "VoxelCloud", "quantize", "dequantize",
    "morton_code", "morton_codes", "morton_decode",
    "OctreeLevel", "OctreeLevels", "build_octree", "flatten_octree", "expand_children", "group_children",
    "DistortionReport", "d1_psnr", "d2_psnr", "estimate_normals", "psnr_from_mse",
    "read_ply", "write_ply", "read_voxels",
]
