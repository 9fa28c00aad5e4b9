"""Parametric surface clouds: densely sampled, randomly rotated, voxelized.

Every family returns surface samples in a local frame together with a
function giving the distance of a local-frame point to the analytic surface
(exact for spheres and tori, approximate for the others). Samples are
rotated by a random rotation, scaled to a random extent in voxels, placed at
a random position inside the grid and quantized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import ConfigurationError
from ..pcgeom import PointCloud, VoxelCloud, quantize

FAMILIES = ("sphere", "torus", "superquadric", "box_union")

Distance = Callable[[np.ndarray], np.ndarray]


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_sphere(rng, n, **_) -> Tuple[np.ndarray, Distance, float]:
    """Unit sphere; returns samples, distance function and surface area."""
    return _unit_vectors(rng, n), lambda p: np.abs(np.linalg.norm(p, axis=1) - 1.0), 4 * np.pi


def sample_torus(rng, n, minor=None) -> Tuple[np.ndarray, Distance, float]:
    """Torus with major radius 1 about the z axis, sampled uniformly by area."""
    r = minor if minor is not None else rng.uniform(0.25, 0.45)
    theta = np.empty(0)
    while len(theta) < n:  # rejection on the (1 + r cos t) area element
        t = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1 + r, 2 * n) < 1 + r * np.cos(t)
        theta = np.concatenate([theta, t[keep]])
    theta = theta[:n]
    phi = rng.uniform(0, 2 * np.pi, n)
    ring = 1 + r * np.cos(theta)
    pts = np.stack([ring * np.cos(phi), ring * np.sin(phi), r * np.sin(theta)], axis=1)

    def dist(p):
        q = np.hypot(p[:, 0], p[:, 1]) - 1.0
        return np.abs(np.hypot(q, p[:, 2]) - r)
    return pts, dist, 4 * np.pi ** 2 * r


def sample_superquadric(rng, n, exponent=None, axes=None) -> Tuple[np.ndarray, Distance, float]:
    """Superellipsoid ``sum |x_i / a_i|^(2/e) = 1`` by radial projection of directions."""
    e = exponent if exponent is not None else rng.uniform(0.3, 1.6)
    a = np.asarray(axes if axes is not None else rng.uniform(0.6, 1.0, 3))
    u = _unit_vectors(rng, n)

    def radial(v):
        return np.sum(np.abs(v / a) ** (2.0 / e), axis=1) ** (-e / 2.0)
    pts = u * radial(u)[:, None]

    def dist(p):
        norm = np.linalg.norm(p, axis=1)
        surf = radial(p / np.maximum(norm, 1e-12)[:, None])
        return np.abs(norm - surf)  # along the ray: an upper bound of the distance
    return pts, dist, 4 * np.pi * float(np.mean(a)) ** 2


def _box_faces(rng, lo, hi, n):
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, n, p=areas / areas.sum())
    pts = lo + rng.uniform(0, 1, (n, 3)) * size
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, lo[axis], hi[axis])
    return pts, areas.sum()


def sample_box_union(rng, n, boxes=None) -> Tuple[np.ndarray, Distance, float]:
    """Surface of the union of two or three overlapping axis-aligned boxes."""
    if boxes is None:
        boxes = _box_params(rng)["boxes"]
    boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in boxes]
    area = sum((2 * ((hi - lo)[0] * (hi - lo)[1] + (hi - lo)[1] * (hi - lo)[2]
                     + (hi - lo)[0] * (hi - lo)[2])) for lo, hi in boxes)
    parts = []
    for lo, hi in boxes:
        share = 2 * ((hi - lo)[0] * (hi - lo)[1] + (hi - lo)[1] * (hi - lo)[2]
                     + (hi - lo)[0] * (hi - lo)[2]) / area
        pts, _ = _box_faces(rng, lo, hi, int(np.ceil(n * share)))
        inside_other = np.zeros(len(pts), bool)
        for lo2, hi2 in boxes:
            if lo2 is lo:
                continue
            inside_other |= np.all((pts > lo2) & (pts < hi2), axis=1)
        parts.append(pts[~inside_other])
    pts = np.concatenate(parts)

    def box_sdf(p, lo, hi):
        c, h = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(p - c) - h
        return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)

    def dist(p):
        return np.abs(np.min([box_sdf(p, lo, hi) for lo, hi in boxes], axis=0))
    return pts, dist, area


SAMPLERS = {"sphere": sample_sphere, "torus": sample_torus,
            "superquadric": sample_superquadric, "box_union": sample_box_union}


def _box_params(rng):
    k = rng.integers(2, 4)
    centres = rng.uniform(-0.35, 0.35, (k, 3))
    halves = rng.uniform(0.2, 0.6, (k, 3))
    return {"boxes": [(c - h, c + h) for c, h in zip(centres, halves)]}


# shape parameters are drawn before sampling so the area, and hence the
# sample count, refers to the same shape
PARAMS = {
    "sphere": lambda rng: {},
    "torus": lambda rng: {"minor": rng.uniform(0.25, 0.45)},
    "superquadric": lambda rng: {"exponent": rng.uniform(0.3, 1.6), "axes": rng.uniform(0.6, 1.0, 3)},
    "box_union": _box_params,
}


@dataclass(frozen=True)
class Placement:
    """Local frame to voxel grid: ``grid = scale * R @ local + offset``."""

    rotation: np.ndarray
    scale: float
    offset: np.ndarray

    def to_grid(self, local: np.ndarray) -> np.ndarray:
        return self.scale * local @ self.rotation.T + self.offset

    def to_local(self, grid: np.ndarray) -> np.ndarray:
        return ((np.asarray(grid, float) - self.offset) / self.scale) @ self.rotation


@dataclass
class SyntheticShape:
    name: str
    family: str
    cloud: VoxelCloud
    placement: Placement
    distance: Distance  # local frame distance to the surface
    points: np.ndarray  # the real-valued samples in the grid frame

    @property
    def original(self) -> PointCloud:
        """The unquantized samples, the reference for distortion measurements."""
        return PointCloud(self.points)

    def grid_distance(self, grid_points: np.ndarray) -> np.ndarray:
        """Distance in voxels from grid-frame points to the analytic surface."""
        return self.placement.scale * self.distance(self.placement.to_local(grid_points))


def synth_shape(family: str, rng: np.random.Generator, depth: int = 8,
                extent: Tuple[float, float] = (36.0, 56.0), density: float = 6.0,
                name: str = "") -> SyntheticShape:
    """One shape, ``extent`` its approximate diameter in voxels.

    ``density`` is the number of samples per square voxel of surface area.
    """
    if family not in SAMPLERS:
        raise ConfigurationError(f"unknown shape family {family!r}; choose from {FAMILIES}")
    side = 1 << depth
    diameter = rng.uniform(*extent)
    scale = diameter / 2.0
    rotation = Rotation.random(random_state=rng).as_matrix()
    params = PARAMS[family](rng)
    _, _, area = SAMPLERS[family](np.random.default_rng(0), 1, **params)
    n = int(density * area * scale ** 2)
    local, dist, _ = SAMPLERS[family](rng, n, **params)
    rotated = scale * local @ rotation.T
    lo, hi = rotated.min(0), rotated.max(0)
    if np.any(hi - lo > side - 2):
        raise ConfigurationError(f"extent {diameter:.1f} does not fit a depth-{depth} grid")
    offset = rng.uniform(-lo + 0.5, side - 1.5 - hi)
    placement = Placement(rotation, scale, offset)
    points = rotated + offset
    cloud = quantize(points, 1.0, depth)
    return SyntheticShape(name or family, family, cloud, placement, dist, points)


@dataclass(frozen=True)
class DatasetSpec:
    families: Sequence[str] = FAMILIES
    count: int = 8
    depth: int = 8
    extent: Tuple[float, float] = (36.0, 56.0)
    density: float = 6.0


def synth_dataset(spec: DatasetSpec, seed: int) -> List[SyntheticShape]:
    """``spec.count`` shapes cycling through the families; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = []
    for k in range(spec.count):
        family = spec.families[k % len(spec.families)]
        child = np.random.default_rng(rng.integers(0, 2 ** 63))
        shapes.append(synth_shape(family, child, spec.depth, spec.extent, spec.density,
                                  name=f"{family}_{k:03d}"))
    return shapes


def surface_voxels_sphere(centre: np.ndarray, radius: float, depth: int) -> np.ndarray:
    """Voxels whose cell ``[v - 0.5, v + 0.5]^3`` meets the sphere surface."""
    lo = np.floor(centre - radius - 1).astype(int)
    hi = np.ceil(centre + radius + 1).astype(int)
    axes = [np.arange(max(a, 0), min(b, (1 << depth) - 1) + 1) for a, b in zip(lo, hi)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    d = g - centre
    near = np.linalg.norm(np.maximum(np.abs(d) - 0.5, 0), axis=1)
    far = np.linalg.norm(np.abs(d) + 0.5, axis=1)
    return g[(near <= radius) & (far >= radius)]


__all__ = ["FAMILIES", "SAMPLERS", "Placement", "SyntheticShape", "DatasetSpec", "synth_shape",
           "synth_dataset", "surface_voxels_sphere", "sample_sphere", "sample_torus",
           "sample_superquadric", "sample_box_union"]
