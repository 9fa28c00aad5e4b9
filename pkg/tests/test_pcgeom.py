import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcvox.errors import ConfigurationError, IntegrityError, PlyParseError, UnsupportedFormatError
from pcvox.pcgeom import (OctreeLevel, OctreeLevels, PointCloud, VoxelCloud, build_octree, d1_psnr,
                          d2_psnr, estimate_normals, flatten_octree, morton_code, quantize, read_ply,
                          write_ply)


def interleave_oracle(coord, depth):
    bits = []
    for b in range(depth - 1, -1, -1):
        for c in coord:
            bits.append(str((c >> b) & 1))
    return int("".join(bits), 2) if bits else 0


def random_cloud(rng, n, depth):
    return VoxelCloud.from_coords(rng.integers(0, 1 << depth, (n, 3)), depth)


# --- morton ---------------------------------------------------------------

def test_morton_examples():
    assert morton_code((0, 0, 0), 7) == 0
    assert morton_code((1, 0, 0), 1) == 4
    assert morton_code((1, 2, 3), 2) == interleave_oracle((1, 2, 3), 2) == 29


def test_morton_out_of_range():
    with pytest.raises(ValueError):
        morton_code((4, 0, 0), 2)


@given(st.integers(1, 16).flatmap(
    lambda d: st.tuples(st.just(d), st.tuples(*[st.integers(0, (1 << d) - 1)] * 3))))
def test_morton_matches_string_interleave(args):
    depth, coord = args
    assert morton_code(coord, depth) == interleave_oracle(coord, depth)


# --- quantize -------------------------------------------------------------

def test_quantize_rounding():
    vc = quantize(PointCloud([(0.4, 0, 0), (0.6, 0, 0)]), 1.0, 4)
    assert vc.coords.tolist() == [[0, 0, 0], [1, 0, 0]]


def test_quantize_half_away_from_zero_and_clamp():
    vc = quantize(PointCloud([(0.5, 1.5, 2.5), (-3.0, 99.0, 0.0)]), 1.0, 4)
    assert sorted(map(tuple, vc.coords.tolist())) == [(0, 15, 0), (1, 2, 3)]


def test_quantize_idempotent_on_integer_clouds():
    rng = np.random.default_rng(1)
    vc = random_cloud(rng, 300, 7)
    assert quantize(PointCloud(vc.coords.astype(float)), 1.0, 7) == vc


def test_quantize_voxels_near_inputs():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1023, (1000, 3))
    vc = quantize(PointCloud(pts), 1.0, 10)
    assert len(vc) <= 1000
    # brute force: every voxel lies within half a voxel (per axis) of some input
    cheb = np.abs(vc.coords[:, None, :] - pts[None, :, :]).max(axis=2)
    assert np.all(cheb.min(axis=1) <= 0.5 + 1e-12)


def test_quantize_rejects_bad_scale():
    with pytest.raises(ValueError):
        quantize(PointCloud([(0, 0, 0)]), 0.0, 3)


# --- octree ---------------------------------------------------------------

def test_octree_single_voxel():
    tree = build_octree(VoxelCloud.from_coords([(0, 0, 0)], 3))
    assert len(tree) == 3
    for level in tree.levels:
        assert len(level) == 1 and level.occupancy[0] == 0x01
    assert flatten_octree(tree) == VoxelCloud.from_coords([(0, 0, 0)], 3)


def test_octree_full_cube():
    g = np.stack(np.meshgrid(*[np.arange(4)] * 3), -1).reshape(-1, 3)
    vc = VoxelCloud.from_coords(g, 2)
    tree = build_octree(vc)
    assert all(np.all(level.occupancy == 0xFF) for level in tree.levels)
    assert flatten_octree(tree) == vc


def test_octree_child_index_convention():
    tree = build_octree(VoxelCloud.from_coords([(1, 0, 0), (0, 1, 1)], 1))
    assert tree.levels[0].occupancy[0] == (1 << 4) | (1 << 3)


@settings(max_examples=60, deadline=None)
@given(depth=st.integers(2, 8), n=st.integers(1, 500), seed=st.integers(0, 2**31))
def test_flatten_build_identity(depth, n, seed):
    vc = random_cloud(np.random.default_rng(seed), n, depth)
    tree = build_octree(vc)
    assert flatten_octree(tree) == vc
    sizes = [len(level) for level in tree.levels] + [len(vc)]
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))
    assert all(np.all(level.occupancy != 0) for level in tree.levels)
    for lvl in range(depth - 1):
        assert np.array_equal(tree.child_codes(lvl), tree.levels[lvl + 1].codes)


def test_flatten_rejects_inconsistent_levels():
    tree = build_octree(VoxelCloud.from_coords([(0, 0, 0), (3, 3, 3)], 2))
    bad = OctreeLevels(2, [tree.levels[0], OctreeLevel(tree.levels[1].codes[:1], tree.levels[1].occupancy[:1])])
    with pytest.raises(IntegrityError):
        flatten_octree(bad)
    zero = OctreeLevels(2, [tree.levels[0], OctreeLevel(tree.levels[1].codes, np.array([1, 0], np.uint8))])
    with pytest.raises(IntegrityError):
        flatten_octree(zero)


# --- metrics --------------------------------------------------------------

def brute_nn(src, ref):
    d2 = ((src[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    return d2.min(axis=1), d2.argmin(axis=1)


def brute_d1(a, b, depth):
    ab = brute_nn(a, b)[0].mean()
    ba = brute_nn(b, a)[0].mean()
    peak = 3 * (2 ** depth - 1) ** 2
    m = max(ab, ba)
    return (100.0 if m == 0 else min(100.0, 10 * math.log10(peak / m))), ab, ba


def test_d1_identity_capped():
    vc = random_cloud(np.random.default_rng(3), 50, 6)
    rep = d1_psnr(vc, vc)
    assert rep.d1_psnr == 100.0 and rep.chamfer == 0.0


def test_d1_unit_offset():
    a = VoxelCloud.from_coords([(0, 0, 0)], 10)
    b = VoxelCloud.from_coords([(1, 0, 0)], 10)
    rep = d1_psnr(a, b)
    assert rep.mse_ab == rep.mse_ba == 1.0
    assert rep.d1_psnr == pytest.approx(10 * math.log10(3 * 1023 ** 2), abs=1e-12)
    assert rep.d1_psnr == pytest.approx(64.97, abs=0.01)


def test_d1_depth_mismatch():
    with pytest.raises(ValueError):
        d1_psnr(VoxelCloud.from_coords([(0, 0, 0)], 3), VoxelCloud.from_coords([(0, 0, 0)], 4))


@pytest.mark.parametrize("seed", range(5))
def test_d1_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = random_cloud(rng, 200, 7), random_cloud(rng, 180, 7)
    rep = d1_psnr(a, b)
    psnr, ab, ba = brute_d1(a.coords.astype(float), b.coords.astype(float), 7)
    assert rep.d1_psnr == pytest.approx(psnr, abs=1e-9)
    assert rep.mse_ab == pytest.approx(ab, abs=1e-9)
    assert rep.chamfer == pytest.approx(ab + ba, abs=1e-9)
    assert d1_psnr(b, a).d1_psnr == pytest.approx(rep.d1_psnr, abs=1e-12)


def test_d2_identity_and_tangent_offset():
    g = np.stack(np.meshgrid(np.arange(10), np.arange(10), [5]), -1).reshape(-1, 3)
    a = VoxelCloud.from_coords(g, 5)
    assert d2_psnr(a, a) == 100.0
    b = VoxelCloud.from_coords(g + (1, 0, 0), 5)
    n = np.tile([0.0, 0.0, 1.0], (len(a), 1))
    assert d2_psnr(a, b, normals_a=n, normals_b=n) == 100.0


def test_d2_requires_normals_without_estimation():
    a = VoxelCloud.from_coords([(0, 0, 0), (1, 0, 0), (0, 1, 0)], 3)
    with pytest.raises(ConfigurationError):
        d2_psnr(a, a, estimate=False)


@pytest.mark.parametrize("seed", range(5))
def test_d2_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pa, pb = rng.uniform(0, 255, (150, 3)), rng.uniform(0, 255, (120, 3))
    na = rng.normal(size=pa.shape)
    na /= np.linalg.norm(na, axis=1, keepdims=True)
    nb = rng.normal(size=pb.shape)
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    _, iab = brute_nn(pa, pb)
    _, iba = brute_nn(pb, pa)
    e_ab = np.einsum("ij,ij->i", pa - pb[iab], nb[iab]) ** 2
    e_ba = np.einsum("ij,ij->i", pb - pa[iba], na[iba]) ** 2
    expect = 10 * math.log10(3 * 255 ** 2 / max(e_ab.mean(), e_ba.mean()))
    got = d2_psnr(PointCloud(pa, na), PointCloud(pb, nb), depth=8)
    assert got == pytest.approx(expect, abs=1e-9)


def test_normals_plane_and_line():
    g = np.stack(np.meshgrid(np.arange(8), np.arange(8), [0]), -1).reshape(-1, 3)
    n, degenerate = estimate_normals(VoxelCloud.from_coords(g, 4), 9)
    assert not degenerate.any()
    assert np.allclose(np.abs(n), [0, 0, 1])
    line = VoxelCloud.from_coords([(i, 0, 0) for i in range(12)], 4)
    n, degenerate = estimate_normals(line, 3)
    assert degenerate.all()
    assert np.allclose(n, [0, 0, 1])


def _radial_agreement(pts, normals, center):
    radial = pts - center
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    cos = np.abs(np.einsum("ij,ij->i", normals, radial))
    return np.mean(cos >= math.cos(math.radians(15)))


def test_normals_sphere_radial():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(40000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    samples = v[:5000] * 40 + 64
    n, _ = estimate_normals(samples, 9)
    assert _radial_agreement(samples, n, 64.0) >= 0.95
    # voxel staircases need a wider neighbourhood than the default
    vc = quantize(PointCloud(v * 40 + 64), 1.0, 7)
    n, _ = estimate_normals(vc, 15)
    assert _radial_agreement(vc.coords.astype(float), n, 64.0) >= 0.95


# --- ply ------------------------------------------------------------------

def test_read_ascii_three_vertices(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n4.5 5 6\n")
    pc = read_ply(p)
    assert len(pc) == 3 and pc.normals is None
    assert pc.points[2].tolist() == [4.5, 5, 6]


def test_binary_ascii_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    pc = PointCloud(rng.uniform(-100, 100, (500, 3)))
    write_ply(pc, tmp_path / "b.ply", "binary")
    write_ply(pc, tmp_path / "a.ply", "ascii")
    b = read_ply(tmp_path / "b.ply").points
    a = read_ply(tmp_path / "a.ply").points
    assert np.array_equal(a, b)
    assert np.array_equal(b, pc.points.astype(np.float32).astype(np.float64))


def test_normals_renormalized(tmp_path):
    p = tmp_path / "n.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float nx\nproperty float ny\nproperty float nz\n"
                 "end_header\n0 0 0 0 0 2\n1 1 1 3 4 0\n")
    pc = read_ply(p)
    assert np.allclose(np.linalg.norm(pc.normals, axis=1), 1.0, atol=1e-12)
    assert np.allclose(pc.normals[1], [0.6, 0.8, 0.0])


@pytest.mark.parametrize("fmt", ["ascii", "binary"])
def test_voxel_roundtrip(tmp_path, fmt):
    rng = np.random.default_rng(6)
    vc = random_cloud(rng, 10000, 10)
    write_ply(vc, tmp_path / "v.ply", fmt)
    back = VoxelCloud.from_coords(read_ply(tmp_path / "v.ply").points.astype(np.int64), 10)
    assert set(map(tuple, back.coords.tolist())) == set(map(tuple, vc.coords.tolist()))
    one = VoxelCloud.from_coords([(0, 0, 0)], 1)
    write_ply(one, tmp_path / "o.ply", fmt)
    assert read_ply(tmp_path / "o.ply").points.tolist() == [[0, 0, 0]]


def test_malformed_header_reports_line(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex x\nend_header\n")
    with pytest.raises(PlyParseError) as err:
        read_ply(p)
    assert err.value.line == 3


def test_unsupported_property_type(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float128 x\nend_header\n")
    with pytest.raises(UnsupportedFormatError):
        read_ply(p)


def test_big_endian_unsupported(tmp_path):
    p = tmp_path / "be.ply"
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\n"
                  b"property float y\nproperty float z\nend_header\n")
    with pytest.raises(UnsupportedFormatError):
        read_ply(p)


def test_int_properties_binary(tmp_path):
    p = tmp_path / "i.ply"
    rec = np.array([(1, 2, 3), (7, 8, 9)], dtype=[("x", "<i4"), ("y", "<i4"), ("z", "<i4")])
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty int x\n"
                  b"property int y\nproperty int z\nend_header\n" + rec.tobytes())
    assert read_ply(p).points.tolist() == [[1, 2, 3], [7, 8, 9]]
