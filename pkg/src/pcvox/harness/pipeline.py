"""End-to-end experiment: data, both training stages, RD sweep, report."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .. import octcodec
from .. import surrogate as sur
from .. import voxnet as vox
from ..pcgeom import VoxelCloud, group_children, morton_decode
from .config import ExperimentConfig
from .rd import Original, rd_sweep
from .report import write_report
from .synth import DatasetSpec, SyntheticShape, synth_dataset, synth_shape
from .train import train_surrogate, train_voxnet


def dataset_seeds(seed: int) -> Tuple[int, int]:
    """Independent seeds for the training and the held-out set."""
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def datasets(cfg: ExperimentConfig) -> Tuple[List[SyntheticShape], List[SyntheticShape]]:
    train_seed, test_seed = dataset_seeds(cfg.seed)
    spec = DatasetSpec(cfg.families, cfg.train_count, cfg.depth,
                       (cfg.extent_min, cfg.extent_max), cfg.density)
    train = synth_dataset(spec, train_seed)
    test = synth_dataset(DatasetSpec(cfg.families, cfg.test_count, cfg.depth,
                                     (cfg.extent_min, cfg.extent_max), cfg.density), test_seed)
    return train, test


def flops_cloud(n_parents: int, depth: int = 8, seed: int = 0) -> VoxelCloud:
    """A surface cloud cut down to its first ``n_parents`` parents in Morton order."""
    side = 1 << depth
    shape = synth_shape("sphere", np.random.default_rng(seed), depth,
                        extent=(0.6 * side, 0.68 * side))
    parents, occ = group_children(shape.cloud.codes)
    if len(parents) < n_parents:
        raise ValueError(f"only {len(parents)} parents available")
    keep = np.isin(shape.cloud.codes >> 3, parents[:n_parents])
    return VoxelCloud(depth, morton_decode(shape.cloud.codes[keep], depth))


def flops_ablation(cfg: ExperimentConfig) -> List[Tuple[str, int, int, int]]:
    """``(variant, parents, input points, FLOPs)`` for back-loaded and mid upsampling."""
    vc = flops_cloud(cfg.flops_parents, cfg.depth, cfg.seed)
    rows = []
    for mode in vox.UPSAMPLE_MODES:
        model = vox.VoxNetModel(cfg.voxnet_channels, cfg.voxnet_blocks, mode, seed=cfg.seed)
        rows.append((mode, cfg.flops_parents, len(vc), vox.flops(model, vc)))
    return rows


def codec_comparison(model: sur.SurrogateModel, clouds: Sequence[VoxelCloud]) -> Dict[str, float]:
    """Lossless bits per point of the three entropy coders on ``clouds``."""
    n = sum(len(c) for c in clouds)
    bits = {"surrogate": 0, "octcodec": 0, "context_free": 0}
    for vc in clouds:
        bs = sur.lossless_encode(model, vc)
        if sur.lossless_decode(model, bs.to_bytes()) != vc:
            raise AssertionError("surrogate codec round trip failed")
        bits["surrogate"] += 8 * len(bs.payload)
        bits["octcodec"] += 8 * len(octcodec.encode(vc).payload)
        bits["context_free"] += 8 * len(octcodec.encode_context_free(vc))
    return {k: v / n for k, v in bits.items()}


def run_pipeline(cfg: ExperimentConfig, log: Callable[[str], None] = print) -> Dict[str, Path]:
    """Everything under ``cfg.out_dir``; a pure function of ``cfg``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    lines: List[str] = []

    def record(msg: str) -> None:
        lines.append(msg)
        log(msg)

    train, test = datasets(cfg)
    record(f"data: {len(train)} training and {len(test)} held-out clouds")
    surrogate, _ = train_surrogate(cfg, [s.cloud for s in train], record, out / "surrogate.pvnn")
    codecs = codec_comparison(surrogate, [s.cloud for s in test])
    sources = [s.original for s in train[:cfg.voxnet_train_count]]
    voxnets, points = {}, []
    for lam in cfg.lambdas:
        model, history = train_voxnet(cfg, surrogate, sources, lam, record,
                                      out / f"voxnet_lambda_{lam:g}.pvnn")
        voxnets[lam] = model
        points.append((lam, history[-1]["point_ratio"] if history else float("nan")))
    originals = [Original(s.name, s.original, cfg.depth) for s in test]
    rd = rd_sweep(originals, cfg.scales, voxnets, "octcodec", record)
    notes = ["held-out lossless bpp: " + ", ".join(f"{k} {v:.4f}" for k, v in codecs.items()),
             f"surrogate vs context-free: {(codecs['surrogate'] / codecs['context_free'] - 1) * 100:+.2f}%",
             f"surrogate vs octcodec: {(codecs['surrogate'] / codecs['octcodec'] - 1) * 100:+.2f}%"]
    notes += [f"lambda {lam:g}: emitted/input points at the last epoch {r:.4f}" for lam, r in points]
    files = write_report(out, rd, flops_ablation(cfg), notes)
    (out / "train_log.txt").write_text("\n".join(lines) + "\n")
    files.update({"config": out / "config.txt", "log": out / "train_log.txt",
                  "surrogate": out / "surrogate.pvnn"})
    return files


__all__ = ["dataset_seeds", "datasets", "flops_cloud", "flops_ablation", "codec_comparison",
           "run_pipeline"]
