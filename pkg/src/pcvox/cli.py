"""Command line entry point: ``pcvox <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from . import octcodec
from . import surrogate as sur
from . import voxnet as vox
from .bitcodec import CODEC_OCTREE, CODEC_SURROGATE, Bitstream
from .errors import PcvoxError
from .harness import pipeline, rd, report
from .harness.bdrate import RDCurve, bd_rate
from .harness.config import add_config_arguments, config_from_args
from .harness.train import train_surrogate, train_voxnet
from .pcgeom import dequantize, quantize, read_ply, read_voxels, write_ply


def _ply_files(directory: str) -> List[Path]:
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise PcvoxError(f"no .ply files in {directory}")
    return files


def cmd_synth_data(args) -> None:
    cfg = config_from_args(args)
    train, test = pipeline.datasets(cfg)
    for split, shapes in (("train", train), ("test", test)):
        d = Path(args.out) / split
        d.mkdir(parents=True, exist_ok=True)
        for s in shapes:
            # training clouds are voxels; held-out clouds keep the real-valued samples
            write_ply(s.cloud if split == "train" else s.original, d / f"{s.name}.ply")
    print(f"wrote {len(train)} training and {len(test)} held-out clouds to {args.out}")


def cmd_train_surrogate(args) -> None:
    cfg = config_from_args(args)
    clouds = [read_voxels(p, cfg.depth) for p in _ply_files(args.data)]
    train_surrogate(cfg, clouds, print, args.out)
    print(f"saved {args.out}")


def cmd_train_voxnet(args) -> None:
    cfg = config_from_args(args)
    model = sur.load_model(args.surrogate)
    sources = [read_ply(p) for p in _ply_files(args.data)]
    train_voxnet(cfg, model, sources, args.lam, print, args.out)
    print(f"saved {args.out}")


def cmd_encode(args) -> None:
    vc = quantize(read_ply(args.input), args.scale, args.depth)
    if args.model:
        bs = sur.lossless_encode(sur.load_model(args.model), vc, args.scale)
    else:
        bs = octcodec.encode(vc, args.scale)
    data = bs.to_bytes()
    Path(args.out).write_bytes(data)
    print(f"{len(vc)} points, {len(data)} bytes, {8 * len(data) / len(vc):.4f} bits per voxel")


def cmd_decode(args) -> None:
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    if bs.codec_id == CODEC_SURROGATE:
        if not args.model:
            raise PcvoxError("this stream needs --model")
        vc = sur.lossless_decode(sur.load_model(args.model), bs)
    elif bs.codec_id == CODEC_OCTREE:
        vc = octcodec.decode(bs)
    else:
        raise PcvoxError(f"unknown codec id {bs.codec_id}")
    write_ply(dequantize(vc, bs.scale) if args.dequantize else vc, args.out)
    print(f"decoded {len(vc)} points")


def cmd_voxelize(args) -> None:
    res = vox.voxelize_detailed(vox.load_model(args.model), read_ply(args.input), args.scale,
                                args.depth)
    write_ply(res.cloud, args.out)
    edits = vox.prune_region_report(res.scaled, res.cloud)
    print(f"{len(res.scaled)} -> {len(res.cloud)} points (added {edits.added}, removed "
          f"{edits.removed}, pruned parents {edits.pruned_parents})"
          + (" [degenerate: fell back to the scaled input]" if res.degenerate else ""))


def cmd_eval_rd(args) -> None:
    cfg = config_from_args(args)
    originals = [rd.Original(p.stem, read_ply(p), cfg.depth) for p in _ply_files(args.data)]
    voxnets = {}
    for spec in args.voxnet or []:
        lam, _, path = spec.partition("=")
        voxnets[float(lam)] = vox.load_model(path)
    codec = sur.load_model(args.surrogate) if args.surrogate else "octcodec"
    points = rd.rd_sweep(originals, cfg.scales, voxnets, codec, print)
    Path(args.out).write_text(report.rd_csv(points), newline="")
    print(f"wrote {len(points)} RD points to {args.out}")


def cmd_bdrate(args) -> None:
    points = report.parse_rd_csv(Path(args.csv).read_bytes().decode())
    if args.ref or args.test:
        pick = lambda chain: RDCurve.from_points(  # noqa: E731
            rd.pareto([(p.bpp, getattr(p, args.metric + "_psnr")) for p in points
                       if p.chain == chain and (args.cloud is None or p.cloud == args.cloud)]))
        print(f"{bd_rate(pick(args.ref), pick(args.test)):+.4f}")
        return
    for row in report.bd_table(points, metrics=(args.metric,)):
        value = "n/a" if row.bd_rate is None else f"{row.bd_rate:+.4f}%"
        print(f"{row.cloud},{row.metric},{value}")


def cmd_flops(args) -> None:
    cfg = config_from_args(args)
    rows = pipeline.flops_ablation(cfg)
    for name, parents, inputs, f in rows:
        print(f"{name},{parents},{inputs},{f}")
    back, mid = rows[0][3], rows[1][3]
    print(f"reduction {(mid - back) / mid * 100:.2f}%")


def cmd_report(args) -> None:
    cfg = config_from_args(args)
    if args.csv:
        points = report.parse_rd_csv(Path(args.csv).read_bytes().decode())
        files = report.write_report(cfg.out_dir, points, pipeline.flops_ablation(cfg))
    else:
        files = pipeline.run_pipeline(cfg)
    for name, path in sorted(files.items()):
        print(f"{name}: {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcvox", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, config=False):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        if config:
            add_config_arguments(sp)
        return sp

    sp = add("synth-data", cmd_synth_data, "write the synthetic training and held-out sets", True)
    sp.add_argument("--out", required=True)

    sp = add("train-surrogate", cmd_train_surrogate, "pretrain the learned occupancy model", True)
    sp.add_argument("--data", required=True, help="directory of voxel PLY files")
    sp.add_argument("--out", required=True)

    sp = add("train-voxnet", cmd_train_voxnet, "train the voxelization network", True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--lam", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = add("encode", cmd_encode, "quantize and code a PLY file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--depth", type=int, required=True)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--model", help="surrogate checkpoint; octree codec when omitted")

    sp = add("decode", cmd_decode, "decode a .pvx stream to PLY")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model")
    sp.add_argument("--dequantize", action="store_true", help="write coordinates divided by the scale")

    sp = add("voxelize", cmd_voxelize, "run a voxelization network on a PLY file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--scale", type=float, required=True)
    sp.add_argument("--depth", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval-rd", cmd_eval_rd, "RD sweep over held-out originals", True)
    sp.add_argument("--data", required=True, help="directory of original PLY files")
    sp.add_argument("--voxnet", action="append", metavar="LAMBDA=PATH")
    sp.add_argument("--surrogate", help="code with the surrogate codec instead of octcodec")
    sp.add_argument("--out", required=True)

    sp = add("bdrate", cmd_bdrate, "BD-rate from an RD points CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--metric", choices=("d1", "d2"), default="d1")
    sp.add_argument("--ref")
    sp.add_argument("--test")
    sp.add_argument("--cloud")

    add("flops", cmd_flops, "back-loaded versus mid-network upsampling FLOPs", True)

    sp = add("report", cmd_report, "write report files (runs the whole pipeline without --csv)", True)
    sp.add_argument("--csv", help="existing RD points CSV")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PcvoxError as exc:
        print(f"pcvox: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
