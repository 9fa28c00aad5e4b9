import io
import shutil
import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcvox import surrogate as S
from pcvox.cli import main
from pcvox.errors import ConfigurationError, IntegrityError, TrainingDivergedError
from pcvox.harness import pipeline, rd, report, train
from pcvox.harness.bdrate import NoOverlapError, RDCurve, bd_rate
from pcvox.harness.config import ExperimentConfig, load_config, parse_config_text
from pcvox.harness.synth import (DatasetSpec, sample_sphere, surface_voxels_sphere, synth_dataset,
                                 synth_shape)
from pcvox.pcgeom import PointCloud, VoxelCloud, quantize, read_ply, write_ply

REF = RDCurve(((0.1, 30.0), (0.25, 34.0), (0.6, 38.5), (1.4, 42.0), (3.0, 45.0)))


def scaled(curve, k):
    return RDCurve(tuple((r * k, q) for r, q in curve.samples))


# ------------------------------------------------------------------ bd rate

def test_bd_rate_identity_and_scaling():
    assert bd_rate(REF, REF) == pytest.approx(0.0, abs=1e-9)
    assert bd_rate(REF, scaled(REF, 2.0)) == pytest.approx(100.0, abs=1e-6)
    assert bd_rate(REF, scaled(REF, 0.5)) == pytest.approx(-50.0, abs=1e-6)
    assert bd_rate(scaled(REF, 2.0), REF) == pytest.approx(-50.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(k=st.floats(0.2, 5.0), seed=st.integers(0, 2**31))
def test_bd_rate_constant_factor(k, seed):
    rng = np.random.default_rng(seed)
    rates = np.sort(rng.uniform(0.05, 4.0, 6))
    rates = rates[np.r_[True, np.diff(rates) > 1e-3]]
    if len(rates) < 4:
        return
    psnr = 30 + 5 * np.log(rates) + rng.normal(0, 0.3, len(rates))
    ref = RDCurve(tuple(zip(rates, psnr)))
    assert bd_rate(ref, scaled(ref, k)) == pytest.approx((k - 1) * 100, rel=1e-9, abs=1e-9)


def test_bd_rate_against_closed_form():
    # log-rate exactly linear in PSNR: the average difference is analytic
    q = np.array([30.0, 33.0, 36.0, 39.0, 42.0])
    ref = RDCurve(tuple(zip(np.exp(0.2 * q - 7), q)))
    test = RDCurve(tuple(zip(np.exp(0.25 * q - 8.5), q)))
    # mean over [30, 42] of (0.05 q - 1.5) = 0.05 * 36 - 1.5
    assert bd_rate(ref, test) == pytest.approx((np.exp(0.3) - 1) * 100, rel=1e-9)


def test_bd_rate_no_overlap():
    high = RDCurve(tuple((r, q + 50) for r, q in REF.samples))
    with pytest.raises(NoOverlapError):
        bd_rate(REF, high)


@pytest.mark.parametrize("samples", [
    ((0.1, 30), (0.2, 31), (0.3, 32)),  # too few
    ((0.1, 30), (0.2, 31), (0.2, 32), (0.4, 33)),  # repeated bpp
    ((0.0, 30), (0.2, 31), (0.3, 32), (0.4, 33)),  # zero bpp
    ((0.1, 30), (0.2, np.nan), (0.3, 32), (0.4, 33)),
])
def test_rd_curve_validation(samples):
    with pytest.raises(ValueError):
        RDCurve(samples)


def test_pareto_front():
    pts = [(1.0, 30.0), (2.0, 29.0), (2.0, 35.0), (3.0, 34.0), (4.0, 40.0), (0.5, 25.0)]
    assert rd.pareto(pts) == [(0.5, 25.0), (1.0, 30.0), (2.0, 35.0), (4.0, 40.0)]


# ------------------------------------------------------------------ synth

def test_dataset_is_deterministic():
    spec = DatasetSpec(count=4, extent=(20, 30))
    a, b = synth_dataset(spec, 7), synth_dataset(spec, 7)
    assert [s.name for s in a] == [s.name for s in b]
    assert all(x.cloud == y.cloud and np.array_equal(x.points, y.points) for x, y in zip(a, b))
    assert any(x.cloud != y.cloud for x, y in zip(a, synth_dataset(spec, 8)))


def test_dense_sphere_covers_its_surface_voxels():
    rng = np.random.default_rng(0)
    shape = synth_shape("sphere", rng, depth=8, extent=(60, 60), density=40.0)
    centre = shape.placement.offset
    expected = surface_voxels_sphere(centre, shape.placement.scale, 8)
    got = set(map(tuple, shape.cloud.coords.tolist()))
    hit = np.mean([tuple(v) in got for v in expected.tolist()])
    assert hit >= 0.9


@pytest.mark.parametrize("family", ["torus", "sphere"])
def test_voxels_lie_on_the_analytic_surface(family):
    shape = synth_shape(family, np.random.default_rng(1), depth=8, extent=(40, 50))
    # a voxel holds a sample, so its centre is within half a voxel diagonal of the surface
    assert shape.grid_distance(shape.cloud.coords.astype(float)).max() <= np.sqrt(3) / 2 + 1e-9


def test_unknown_family():
    with pytest.raises(ConfigurationError):
        synth_shape("teapot", np.random.default_rng(0))


# ----------------------------------------------------------------- config

def test_config_roundtrip_and_overrides(tmp_path):
    cfg = ExperimentConfig().override(lambdas="0.25, 8", seed=3)
    assert cfg.lambdas == (0.25, 8.0) and cfg.seed == 3
    path = tmp_path / "c.txt"
    path.write_text("# comment\n" + cfg.to_text() + "\n")
    assert load_config(path) == cfg
    assert load_config(path, seed="9").seed == 9
    assert load_config(path, seed=None).seed == 3


@pytest.mark.parametrize("text", ["nonsense", "no_such_key = 1", "seed = x"])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig().override(**parse_config_text(text))


# --------------------------------------------------------------------- rd

def sphere_original(radius=20.0, n=20000, depth=8):
    pts, _, _ = sample_sphere(np.random.default_rng(2), n)
    return rd.Original("sphere", PointCloud(pts * radius + 128.3), depth)


def test_plain_chain_is_monotone():
    orig = sphere_original()
    pts = [rd.measure(orig, quantize(orig.cloud, s, train.scaled_depth(8, s)), s, "quantize", 0.0,
                      "octcodec") for s in (0.125, 0.25, 0.5, 1.0)]
    bpp = [p.bpp for p in pts]
    assert bpp == sorted(bpp) and len(set(bpp)) == 4
    assert all(b.d1_psnr >= a.d1_psnr for a, b in zip(pts, pts[1:]))
    assert all(b.d2_psnr >= a.d2_psnr for a, b in zip(pts, pts[1:]))
    assert rd.curve(pts) is not None


def test_lossless_stage_checks_roundtrip(monkeypatch):
    vc = VoxelCloud.from_coords(np.random.default_rng(3).integers(0, 32, (50, 3)), 5)
    assert rd.code_lossless(vc, "octcodec") > 0
    from pcvox import octcodec
    real = octcodec.decode
    monkeypatch.setattr(octcodec, "decode",
                        lambda bs: VoxelCloud(bs.depth, real(bs).coords[:-1]))
    with pytest.raises(IntegrityError):
        rd.code_lossless(vc, "octcodec")


def test_surrogate_codec_in_sweep():
    orig = sphere_original(radius=6.0, n=3000, depth=5)
    model = S.SurrogateModel(channels=4)
    p = rd.rd_sweep([orig], [1.0], {}, model)
    assert len(p) == 1 and p[0].chain == "quantize+surrogate" and p[0].bits > 0


def test_scaled_depth():
    assert train.scaled_depth(8, 0.125) == 5
    with pytest.raises(ValueError):
        train.scaled_depth(8, 0.3)


# ----------------------------------------------------------------- report

def fake_points(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for cloud in ("a", "b"):
        for chain, shift in (("quantize+octcodec", 0.0), ("voxnet+octcodec", 0.5)):
            for k, s in enumerate((0.125, 0.25, 0.5, 1.0)):
                bpp = float(0.05 * 3.5 ** k * rng.uniform(0.9, 1.1))
                out.append(rd.RDPoint(cloud, chain, s, 1.0 if "vox" in chain else 0.0, 100 * k + 7,
                                      int(bpp * 1000), bpp, 40 + 6 * k + shift, 45 + 6 * k + shift))
    return rd.sort_points(out)


def test_rd_csv_roundtrip_is_exact():
    pts = fake_points()
    text = report.rd_csv(pts)
    assert text.endswith("\r\n") and text.count("\r\n") == len(pts) + 1
    assert report.parse_rd_csv(text) == pts


def test_empty_report_is_header_only(tmp_path):
    files = report.write_report(tmp_path, [])
    assert files["rd"].read_bytes() == (",".join(report.RD_COLUMNS) + "\r\n").encode()
    assert files["bd"].read_bytes() == (",".join(report.BD_COLUMNS) + "\r\n").encode()


def test_bd_table_recomputes_from_csv(tmp_path):
    pts = fake_points(1)
    files = report.write_report(tmp_path, pts, [("back", 1000, 3000, 10), ("mid", 1000, 3000, 40)])
    rows = list(csv.DictReader(io.StringIO(files["bd"].read_bytes().decode())))
    again = report.bd_table(report.parse_rd_csv(files["rd"].read_bytes().decode()))
    assert [float(r["bd_rate_percent"]) for r in rows] == [r.bd_rate for r in again]
    direct = {r.cloud: r.bd_rate for r in again if r.metric == "d1"}
    assert direct["average"] == pytest.approx(np.mean([direct["a"], direct["b"]]))
    assert all(v < 0 for v in direct.values())  # the fake voxnet curve sits higher
    assert "reduction 75.00%" in files["summary"].read_text()


def test_report_is_deterministic(tmp_path):
    a = report.write_report(tmp_path / "a", fake_points(2))
    b = report.write_report(tmp_path / "b", fake_points(2))
    assert all(a[k].read_bytes() == b[k].read_bytes() for k in a)


# ------------------------------------------------------------------ train

TINY = ExperimentConfig(train_count=4, test_count=2, extent_min=14, extent_max=18, depth=6,
                        surrogate_channels=4, surrogate_epochs=2, voxnet_channels=4,
                        voxnet_epochs=2, voxnet_train_count=4, lambdas=(1.0,),
                        scales=(1.0, 0.5, 0.25, 0.125), voxnet_scales=(0.5,), flops_parents=50)


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    clouds = [s.cloud for s in pipeline.datasets(TINY)[0]]
    real, calls = S.pretrain_step, []

    def flaky(model, opt, batch):
        calls.append(1)
        if len(calls) > 1:  # the second epoch diverges
            raise TrainingDivergedError("loss is nan")
        return real(model, opt, batch)
    monkeypatch.setattr(S, "pretrain_step", flaky)
    path = tmp_path / "s.pvnn"
    with pytest.raises(TrainingDivergedError, match="last good"):
        train.train_surrogate(TINY, clouds, checkpoint_path=path)
    good = S.load_model(path)  # parameters after the first epoch
    monkeypatch.setattr(S, "pretrain_step", real)
    ref, _ = train.train_surrogate(TINY.override(surrogate_epochs=1), clouds)
    assert good.checkpoint_hash() == ref.checkpoint_hash()


def test_tiny_pipeline_is_byte_identical(tmp_path):
    # same out_dir both times (it is recorded in config.txt); cleared in between
    cfg = TINY.override(out_dir=str(tmp_path / "run"))
    runs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        files = pipeline.run_pipeline(cfg, log=lambda m: None)
        runs.append({k: p.read_bytes() for k, p in files.items()})
    assert runs[0] == runs[1]
    pts = report.parse_rd_csv(runs[0]["rd"].decode())
    assert {p.chain for p in pts} == {"quantize+octcodec", "voxnet+octcodec"}
    assert len(pts) == 2 * 2 * 4


# -------------------------------------------------------------------- cli

def test_cli_encode_decode_roundtrip(tmp_path, capsys):
    vc = VoxelCloud.from_coords(np.random.default_rng(4).integers(0, 64, (300, 3)), 6)
    write_ply(vc, tmp_path / "a.ply")
    assert main(["encode", "--in", str(tmp_path / "a.ply"), "--depth", "6",
                 "--out", str(tmp_path / "a.pvx")]) == 0
    assert main(["decode", "--in", str(tmp_path / "a.pvx"), "--out", str(tmp_path / "b.ply")]) == 0
    back = VoxelCloud.from_coords(np.rint(read_ply(tmp_path / "b.ply").points), 6)
    assert back == vc


def test_cli_bdrate_and_flops(tmp_path, capsys):
    (tmp_path / "rd.csv").write_text(report.rd_csv(fake_points(3)), newline="")
    assert main(["bdrate", "--csv", str(tmp_path / "rd.csv")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("average,d1,-")
    assert main(["flops", "--flops-parents", "200", "--voxnet-channels", "8"]) == 0
    assert "reduction" in capsys.readouterr().out


def test_cli_reports_errors(tmp_path, capsys):
    (tmp_path / "junk.pvx").write_bytes(b"nope")
    assert main(["decode", "--in", str(tmp_path / "junk.pvx"), "--out", str(tmp_path / "x.ply")]) == 1
    assert "error" in capsys.readouterr().err
