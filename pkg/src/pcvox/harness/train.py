"""Two-stage training: pretrain the surrogate, then train voxnet against it frozen."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .. import surrogate as sur
from .. import voxnet as vox
from ..errors import TrainingDivergedError
from ..pcgeom import VoxelCloud, quantize
from ..sparsenn import Adam, step_decay
from .config import ExperimentConfig

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def scaled_depth(depth: int, scale: float) -> int:
    """Grid depth after scaling a ``depth``-bit cloud by a power of two."""
    d = depth + math.log2(scale)
    if abs(d - round(d)) > 1e-9 or round(d) < 1:
        raise ValueError(f"scale {scale} is not a usable power of two at depth {depth}")
    return int(round(d))


def _save_last_good(path, state_bytes: bytes) -> Optional[Path]:
    if path is None:
        return None
    path = Path(path)
    path.write_bytes(state_bytes)
    return path


def train_surrogate(cfg: ExperimentConfig, clouds: Sequence[VoxelCloud], log: Log = _quiet,
                    checkpoint_path: Union[str, Path, None] = None
                    ) -> Tuple[sur.SurrogateModel, List[float]]:
    """Pretrain on the occupancy BCE; returns the model and the mean bits per point per epoch.

    If the loss diverges, the last epoch's parameters are written to
    ``checkpoint_path`` and the error is re-raised.
    """
    model = sur.SurrogateModel(cfg.surrogate_channels, cfg.coarse_levels, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.surrogate_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    points = sum(len(c) for c in clouds)
    history, last_good = [], model.checkpoint_bytes()
    for epoch in range(cfg.surrogate_epochs):
        opt.lr = step_decay(cfg.surrogate_lr, epoch, cfg.lr_decay_every, cfg.lr_decay_factor)
        nats = 0.0
        try:
            for idx in epoch_batches(len(clouds), cfg.batch_size, rng):
                nats += sur.pretrain_step(model, opt, [clouds[i] for i in idx])
        except TrainingDivergedError as exc:
            saved = _save_last_good(checkpoint_path, last_good)
            raise TrainingDivergedError(f"surrogate epoch {epoch}: {exc}; last good "
                                        f"checkpoint: {saved}") from exc
        bpp = nats / math.log(2) / points
        history.append(bpp)
        last_good = model.checkpoint_bytes()
        log(f"surrogate epoch {epoch} lr {opt.lr:.3g} train {bpp:.4f} bpp")
    model.eval()
    if checkpoint_path is not None:
        Path(checkpoint_path).write_bytes(model.checkpoint_bytes())
    return model, history


def voxnet_batches(cfg: ExperimentConfig, sources: Sequence, rng: np.random.Generator
                   ) -> List[List[VoxelCloud]]:
    """One epoch of scaled batches; batch ``k`` uses ``voxnet_scales[k % len]``."""
    out = []
    for k, idx in enumerate(epoch_batches(len(sources), cfg.batch_size, rng)):
        s = cfg.voxnet_scales[k % len(cfg.voxnet_scales)]
        d = scaled_depth(cfg.depth, s)
        out.append([quantize(sources[i], s, d) for i in idx])
    return out


def train_voxnet(cfg: ExperimentConfig, surrogate: sur.SurrogateModel, sources: Sequence,
                 lam: float, log: Log = _quiet,
                 checkpoint_path: Union[str, Path, None] = None
                 ) -> Tuple[vox.VoxNetModel, List[Dict[str, float]]]:
    """Joint training at one ``lam``; ``sources`` are point or voxel clouds in the depth grid.

    The per-epoch history holds the mean loss, distortion and rate (nats and
    bits per scaled input point) and the ratio of emitted to input points.
    """
    model = vox.VoxNetModel(cfg.voxnet_channels, cfg.voxnet_blocks, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.voxnet_lr)
    rng = np.random.default_rng([cfg.seed, 2, int(round(lam * 1000))])
    history, last_good = [], model.checkpoint_bytes()
    for epoch in range(cfg.voxnet_epochs):
        opt.lr = step_decay(cfg.voxnet_lr, epoch, cfg.lr_decay_every, cfg.lr_decay_factor)
        loss = dist = bits = n_in = n_out = 0.0
        try:
            for batch in voxnet_batches(cfg, sources, rng):
                out = vox.joint_train_step(model, surrogate, opt, batch, lam)
                loss += out.loss.item()
                dist += out.distortion
                bits += out.rate_bits.sum()
                n_in += sum(len(c) for c in batch)
                n_out += out.points.sum()
        except TrainingDivergedError as exc:
            saved = _save_last_good(checkpoint_path, last_good)
            raise TrainingDivergedError(f"voxnet lambda {lam} epoch {epoch}: {exc}; last good "
                                        f"checkpoint: {saved}") from exc
        row = {"epoch": epoch, "loss": loss / n_in, "distortion": dist / n_in,
               "rate_bpp": bits / n_in, "point_ratio": n_out / n_in}
        history.append(row)
        last_good = model.checkpoint_bytes()
        log(f"voxnet lambda {lam:g} epoch {epoch} lr {opt.lr:.3g} loss {row['loss']:.4f} "
            f"rate {row['rate_bpp']:.4f} bpp points x{row['point_ratio']:.3f}")
    model.eval()
    if checkpoint_path is not None:
        Path(checkpoint_path).write_bytes(model.checkpoint_bytes())
    return model, history


__all__ = ["epoch_batches", "scaled_depth", "train_surrogate", "voxnet_batches", "train_voxnet"]
