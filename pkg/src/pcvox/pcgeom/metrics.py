"""Geometry distortion: D1 (point-to-point) and D2 (point-to-plane) PSNR."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigurationError
from .cloud import PointCloud, VoxelCloud

PSNR_CAP = 100.0


@dataclass(frozen=True)
class DistortionReport:
    d1_psnr: float
    mse_ab: float
    mse_ba: float
    chamfer: float
    d2_psnr: Optional[float] = None


def _points(c) -> np.ndarray:
    if isinstance(c, VoxelCloud):
        return c.coords.astype(np.float64)
    if isinstance(c, PointCloud):
        return c.points
    return np.asarray(c, dtype=np.float64).reshape(-1, 3)


def _resolve_depth(a, b, depth):
    if depth is not None:
        return depth
    if isinstance(a, VoxelCloud) and isinstance(b, VoxelCloud):
        if a.depth != b.depth:
            raise ValueError(f"depth mismatch: {a.depth} vs {b.depth}")
        return a.depth
    for c in (a, b):
        if isinstance(c, VoxelCloud):
            return c.depth
    raise ValueError("depth is required when neither cloud is a VoxelCloud")


def psnr_from_mse(mse: float, depth: int) -> float:
    if mse <= 0:
        return PSNR_CAP
    peak = 3.0 * ((1 << depth) - 1) ** 2
    return min(PSNR_CAP, 10.0 * np.log10(peak / mse))


def _nearest(src: np.ndarray, ref: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(ref).query(src, k=1)
    return dist, idx


def d1_psnr(a, b, depth: Optional[int] = None) -> DistortionReport:
    """Symmetric point-to-point PSNR; the peak is ``3 * (2^depth - 1)^2``.

    ``chamfer`` is ``mse_ab + mse_ba``.
    """
    if isinstance(a, VoxelCloud) and isinstance(b, VoxelCloud) and a.depth != b.depth:
        raise ValueError(f"depth mismatch: {a.depth} vs {b.depth}")
    depth = _resolve_depth(a, b, depth)
    pa, pb = _points(a), _points(b)
    dab, _ = _nearest(pa, pb)
    dba, _ = _nearest(pb, pa)
    mse_ab = float(np.mean(dab ** 2))
    mse_ba = float(np.mean(dba ** 2))
    return DistortionReport(
        d1_psnr=psnr_from_mse(max(mse_ab, mse_ba), depth),
        mse_ab=mse_ab,
        mse_ba=mse_ba,
        chamfer=mse_ab + mse_ba,
    )


def _plane_mse(src: np.ndarray, ref: np.ndarray, ref_normals: np.ndarray) -> float:
    _, idx = _nearest(src, ref)
    offset = src - ref[idx]
    proj = np.einsum("ij,ij->i", offset, ref_normals[idx])
    return float(np.mean(proj ** 2))


def d2_psnr(a, b, normals_a=None, normals_b=None, depth: Optional[int] = None,
            estimate: bool = True, k: int = 9) -> float:
    """Symmetric point-to-plane PSNR.

    Each direction projects the nearest-neighbour offset on the normal of the
    matched point in the other cloud. Missing normals are estimated from that
    cloud when ``estimate`` is true.
    """
    if isinstance(a, VoxelCloud) and isinstance(b, VoxelCloud) and a.depth != b.depth:
        raise ValueError(f"depth mismatch: {a.depth} vs {b.depth}")
    depth = _resolve_depth(a, b, depth)
    pa, pb = _points(a), _points(b)
    if normals_a is None and isinstance(a, PointCloud):
        normals_a = a.normals
    if normals_b is None and isinstance(b, PointCloud):
        normals_b = b.normals
    if (normals_a is None or normals_b is None) and not estimate:
        raise ConfigurationError("D2 needs normals for both clouds or estimation enabled")
    if normals_a is None:
        normals_a, _ = estimate_normals(pa, k)
    if normals_b is None:
        normals_b, _ = estimate_normals(pb, k)
    mse = max(_plane_mse(pa, pb, np.asarray(normals_b)), _plane_mse(pb, pa, np.asarray(normals_a)))
    return psnr_from_mse(mse, depth)


def estimate_normals(cloud, k: int = 9) -> Tuple[np.ndarray, np.ndarray]:
    """PCA normals from the ``k`` nearest neighbours (self included).

    Returns ``(normals, degenerate)``. Normals point into the ``+z`` half-space
    (ties broken on ``y`` then ``x``); degenerate neighbourhoods, where the two
    largest covariance eigenvalues do not span a plane, get ``(0, 0, 1)``.
    """
    pts = _points(cloud)
    n = len(pts)
    if k < 3 or k > n:
        raise ValueError(f"k must be in 3..{n}, got {k}")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-9 * scale
    degenerate |= evals[:, 2] <= 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    flip = np.where(
        np.abs(normals[:, 2]) > 1e-12, normals[:, 2] < 0,
        np.where(np.abs(normals[:, 1]) > 1e-12, normals[:, 1] < 0, normals[:, 0] < 0),
    )
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, degenerate
