"""Learned occupancy model: a differentiable rate estimate and a lossless codec.

Each octree level below the coarse levels is handled as a sparse tensor of
parent nodes. A feature stack turns the level's geometry into per-parent
features ``f_N``; an aggregation stack then predicts the eight child bits in
eight passes. Pass ``i`` sees the bits ``b_0..b_{i-1}`` of every parent as
extra channels (undecided bits read as -1) and emits ``P(b_i = 1)``.

Within a level the coding order is pass major: child slot 0 of every parent
in Morton order, then slot 1, and so on. The aggregation convolutions mix
neighbouring parents, so a pass may use any bit from an earlier pass but
nothing from its own or later passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import octcodec
from .bitcodec import (CODEC_SURROGATE, PROB_ONE, Bitstream, RangeDecoder, RangeEncoder)
from .errors import (CheckpointMismatchError, ConfigurationError, IntegrityError,
                     TrainingDivergedError)
from .pcgeom import VoxelCloud, build_octree, expand_children, morton_decode
from .sparsenn import (BatchNorm, Conv, Linear, Module, SConvBlock, SInceptionResNet,
                       SparseTensor, Tape, Variable, backward, checkpoint, no_grad, ops)
from .sparsenn.tensor import CoordSet

IN_CHANNELS = 9
LN2 = float(np.log(2.0))
_COLS = np.arange(8)


class SurrogateModel(Module):
    """Feature extraction (two SConvBlocks and an SInceptionResNet) plus aggregation.

    The aggregation input is ``concat(f_N, decided bits)``; its first
    convolution is stored as two weight blocks (``agg_feat`` and
    ``agg_bits``) so that the ``f_N`` half is computed once per level rather
    than once per pass. That is the same function as one convolution on the
    concatenation.
    """

    def __init__(self, channels: int = 32, coarse_levels: int = 2, seed: int = 0):
        if coarse_levels < 1:
            raise ConfigurationError("coarse_levels must be at least 1")
        rng = np.random.default_rng(seed)
        self._channels = channels
        self._coarse_levels = coarse_levels
        self.extract = [SConvBlock(IN_CHANNELS, channels, rng=rng),
                        SConvBlock(channels, channels, rng=rng)]
        self.inception = SInceptionResNet(channels, rng=rng)
        self.agg_feat = Conv(channels, channels, 3, rng=rng, bias=False)
        self.agg_bits = Conv(8, channels, 3, rng=rng, bias=False)
        self.agg_norm = BatchNorm(channels)
        self.agg_block = SConvBlock(channels, channels, rng=rng)
        self.head = Linear(channels, 8, rng=rng)

    @property
    def coarse_levels(self) -> int:
        return self._coarse_levels

    @property
    def channels(self) -> int:
        return self._channels

    def descriptor(self) -> dict:
        return {"arch": "surrogate", "channels": self._channels,
                "coarse_levels": self._coarse_levels, "in_channels": IN_CHANNELS}

    # -------------------------------------------------------------- network

    def parent_features(self, st: SparseTensor) -> SparseTensor:
        for block in self.extract:
            st = block(st)
        return self.inception(st)

    def feature_part(self, f_n: SparseTensor) -> Variable:
        return self.agg_feat(f_n).feats

    def pass_logits(self, cs: CoordSet, fpart: Variable, bits: Variable, i: int) -> Variable:
        """Logit of ``b_i`` for every parent; ``bits`` must hold -1 in columns ``>= i``."""
        h = ops.add(fpart, self.agg_bits(SparseTensor(cs, bits)).feats)
        h = self.agg_norm(SparseTensor(cs, h))
        h = self.agg_block(h.with_feats(ops.relu(h.feats)))
        return ops.take_cols(self.head(h).feats, [i])

    # ------------------------------------------------------------ checkpoint

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.descriptor(), self.state_dict())

    def checkpoint_hash(self) -> int:
        return checkpoint.checkpoint_hash(self.checkpoint_bytes())


def save_model(model: SurrogateModel, path: Union[str, Path]) -> bytes:
    return checkpoint.save(path, model.descriptor(), model.state_dict())


def load_model(path: Union[str, Path]) -> SurrogateModel:
    desc, tensors = checkpoint.load(path)
    return model_from_checkpoint(desc, tensors)


def model_from_checkpoint(desc: dict, tensors) -> SurrogateModel:
    if desc.get("arch") != "surrogate":
        raise CheckpointMismatchError(f"checkpoint holds a {desc.get('arch')!r} model")
    model = SurrogateModel(desc["channels"], desc["coarse_levels"])
    model.load_state_dict(tensors)
    return model.eval()


# ------------------------------------------------------------ level tensors

def level_features(codes: np.ndarray, parent_codes: np.ndarray, parent_occ: np.ndarray) -> np.ndarray:
    """Input channels per node: a constant 1 and the occupancy byte of the node's parent."""
    pos = np.searchsorted(parent_codes, np.asarray(codes, np.int64) >> 3)
    byte = np.asarray(parent_occ, np.uint8)[pos]
    bits = np.unpackbits(byte[:, None], axis=1, bitorder="little")
    return np.concatenate([np.ones((len(codes), 1)), bits], axis=1).astype(np.float32)


def occupancy_bits(occ: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(occ, np.uint8)[:, None], axis=1,
                         bitorder="little").astype(np.float32)


@dataclass
class LevelBatch:
    """Network levels of several clouds stacked as one sparse tensor.

    ``groups`` names the (cloud index, level) of every batch id.
    """

    tensor: SparseTensor
    targets: np.ndarray  # (N, 8) occupancy bits
    groups: List[Tuple[int, int]]
    coarse_slots: np.ndarray  # per cloud: 8 * nodes in the coarse levels

    @property
    def cloud_of_row(self) -> np.ndarray:
        return np.array([g[0] for g in self.groups], dtype=np.int64)[self.tensor.batch]


def network_levels(clouds: Sequence[VoxelCloud], coarse_levels: int) -> LevelBatch:
    coords, batch, feats, targets, groups = [], [], [], [], []
    coarse_slots = np.zeros(len(clouds), dtype=np.int64)
    for c, vc in enumerate(clouds):
        tree = build_octree(vc)
        k = min(coarse_levels, vc.depth)
        coarse_slots[c] = 8 * sum(len(tree[l]) for l in range(k))
        for lvl in range(k, vc.depth):
            level, up = tree[lvl], tree[lvl - 1]
            coords.append(morton_decode(level.codes))
            batch.append(np.full(len(level), len(groups), dtype=np.int64))
            feats.append(level_features(level.codes, up.codes, up.occupancy))
            targets.append(occupancy_bits(level.occupancy))
            groups.append((c, lvl))
    if not groups:
        empty = SparseTensor(CoordSet(np.zeros((0, 3), np.int64)),
                             Variable(np.zeros((0, IN_CHANNELS), np.float32)))
        return LevelBatch(empty, np.zeros((0, 8), np.float32), groups, coarse_slots)
    cs = CoordSet(np.concatenate(coords), np.concatenate(batch))
    st = SparseTensor(cs, Variable(np.concatenate(feats)))
    return LevelBatch(st, np.concatenate(targets), groups, coarse_slots)


def masked_bits(bits: np.ndarray, i: int) -> np.ndarray:
    """Decided bits for pass ``i``: columns ``>= i`` replaced by -1."""
    return np.where(_COLS < i, bits, -1).astype(np.float32)


def masked_bits_var(bits: Variable, i: int) -> Variable:
    """Differentiable :func:`masked_bits` for bits produced upstream."""
    keep = (_COLS < i).astype(bits.data.dtype)
    return ops.add(ops.mul(bits, Variable(keep)), Variable(keep - 1))


# ------------------------------------------------------------------ losses

def slot_nats(model: SurrogateModel, st: SparseTensor, targets) -> Variable:
    """Per-slot BCE (nats), shape ``(N, 8)``, teacher forced on ``targets``.

    ``targets`` may be a Variable, in which case gradients reach it both as
    the BCE target and through the decided-bit channels.
    """
    f = model.parent_features(st)
    fpart = model.feature_part(f)
    cols = []
    for i in range(8):
        if isinstance(targets, Variable):
            bits = masked_bits_var(targets, i)
            t = ops.take_cols(targets, [i])
        else:
            bits = Variable(masked_bits(targets, i))
            t = targets[:, i:i + 1]
        z = model.pass_logits(st.cs, fpart, bits, i)
        cols.append(ops.bce_with_logits(z, t, reduce=False))
    return ops.concat(cols, axis=1)


def pretrain_loss(model: SurrogateModel, clouds: Sequence[VoxelCloud]) -> Variable:
    """L_p in nats over every network-coded child slot of every cloud."""
    lb = network_levels(clouds, model.coarse_levels)
    if len(lb.tensor) == 0:
        return Variable(np.zeros(()))
    return ops.total(slot_nats(model, lb.tensor, lb.targets))


def pretrain_step(model: SurrogateModel, optimizer, clouds: Sequence[VoxelCloud]) -> float:
    """One Adam step on L_p; returns the loss in nats."""
    model.train()
    optimizer.zero_grad()
    with Tape() as tape:
        loss = pretrain_loss(model, clouds)
    if not np.isfinite(loss.item()):
        raise TrainingDivergedError(f"pretraining loss is {loss.item()}")
    if tape.records:
        backward(tape, loss)
        optimizer.step()
    return loss.item()


def predict_child_probs(model: SurrogateModel, st: SparseTensor, decided: np.ndarray) -> np.ndarray:
    """``P(b_i = 1)`` for every parent and slot, slot ``i`` conditioned on ``decided[:, :i]``."""
    with no_grad():
        f = model.parent_features(st)
        fpart = model.feature_part(f)
        out = [ops.sigmoid(model.pass_logits(st.cs, fpart, Variable(masked_bits(decided, i)), i)).data
               for i in range(8)]
    return np.concatenate(out, axis=1)


def per_cloud_nats(model: SurrogateModel, clouds: Sequence[VoxelCloud]) -> np.ndarray:
    """Network-level BCE of each cloud (nats), without recording gradients."""
    lb = network_levels(clouds, model.coarse_levels)
    out = np.zeros(len(clouds))
    if len(lb.tensor):
        with no_grad():
            nats = slot_nats(model, lb.tensor, lb.targets).data.astype(np.float64).sum(1)
        np.add.at(out, lb.cloud_of_row, nats)
    return out


def estimate_rate(model: SurrogateModel, vc: VoxelCloud) -> float:
    """Estimated code length in bits.

    Network levels cost their BCE in bits. Coarse-level slots, which the
    codec sends with adaptive contexts, are counted at one bit each.
    """
    return estimate_rates(model, [vc])[0]


def estimate_rates(model: SurrogateModel, clouds: Sequence[VoxelCloud]) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        nats = per_cloud_nats(model, clouds)
    finally:
        model.train(was_training)
    coarse = np.array([8 * sum(len(build_octree(vc)[l])
                               for l in range(min(model.coarse_levels, vc.depth)))
                       for vc in clouds], dtype=np.float64)
    return nats / LN2 + coarse


# ------------------------------------------------------------------- codec

def _quantize(p: np.ndarray) -> np.ndarray:
    """Vectorized :func:`pcvox.bitcodec.quantize_probability`."""
    q = np.rint(np.asarray(p, np.float64) * PROB_ONE)
    return np.clip(q, 1, PROB_ONE - 1).astype(np.int64)


class _LevelCoder:
    """Runs the eight passes of one level; shared by encoder and decoder."""

    def __init__(self, model: SurrogateModel, codes, parent_codes, parent_occ):
        feats = level_features(codes, parent_codes, parent_occ)
        self.cs = CoordSet(morton_decode(codes), np.zeros(len(codes), np.int64))
        self.model = model
        f = model.parent_features(SparseTensor(self.cs, Variable(feats)))
        self.fpart = model.feature_part(f)
        self.bits = np.full((len(codes), 8), -1.0, dtype=np.float32)

    def probabilities(self, i: int) -> np.ndarray:
        z = self.model.pass_logits(self.cs, self.fpart, Variable(self.bits), i)
        return _quantize(ops.sigmoid(z).data[:, 0])

    def commit(self, i: int, column: np.ndarray) -> None:
        self.bits[:, i] = column


def lossless_encode(model: SurrogateModel, vc: VoxelCloud, scale: float = 1.0,
                    trace: Optional[list] = None) -> Bitstream:
    """Code ``vc``; ``trace`` collects ``(level, pass, quantized p1 array)`` records."""
    tree = build_octree(vc)
    k = min(model.coarse_levels, vc.depth)
    enc = RangeEncoder()
    octcodec.encode_levels(enc, tree.levels[:k], octcodec.ContextTable())
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for lvl in range(k, vc.depth):
                level, up = tree[lvl], tree[lvl - 1]
                coder = _LevelCoder(model, level.codes, up.codes, up.occupancy)
                target = occupancy_bits(level.occupancy).astype(np.int64)
                for i in range(8):
                    q = coder.probabilities(i)
                    if trace is not None:
                        trace.append((lvl, i, q.copy()))
                    col = target[:, i]
                    for p1, bit in zip(q.tolist(), col.tolist()):
                        enc.encode_bit_static(p1, bit)
                    coder.commit(i, col)
    finally:
        model.train(was_training)
    return Bitstream(CODEC_SURROGATE, vc.depth, float(scale), len(vc), enc.finish(),
                     checkpoint_hash=model.checkpoint_hash(), coarse_levels=k)


def lossless_decode(model: SurrogateModel, bs: Union[Bitstream, bytes],
                    trace: Optional[list] = None) -> VoxelCloud:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bs)
    if bs.codec_id != CODEC_SURROGATE:
        raise IntegrityError(f"not a surrogate stream (codec id {bs.codec_id})")
    if bs.checkpoint_hash != model.checkpoint_hash():
        raise CheckpointMismatchError(
            f"stream was coded with checkpoint {bs.checkpoint_hash:016x}, "
            f"this model is {model.checkpoint_hash():016x}")
    if bs.depth and not 1 <= bs.coarse_levels <= bs.depth:
        raise IntegrityError(f"invalid coarse level count {bs.coarse_levels}")
    dec = RangeDecoder(bs.payload)
    codes, parents, occ = octcodec.decode_levels(dec, bs.coarse_levels, bs.count,
                                                 octcodec.ContextTable())
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for lvl in range(bs.coarse_levels, bs.depth):
                if len(codes) > bs.count:
                    raise IntegrityError(f"level {lvl} has more nodes than the declared count")
                coder = _LevelCoder(model, codes, parents, occ)
                for i in range(8):
                    q = coder.probabilities(i)
                    if trace is not None:
                        trace.append((lvl, i, q.copy()))
                    col = np.array([dec.decode_bit_static(p1) for p1 in q.tolist()],
                                   dtype=np.float32)
                    coder.commit(i, col)
                new_occ = np.packbits(coder.bits.astype(np.uint8), axis=1,
                                      bitorder="little")[:, 0]
                if np.any(new_occ == 0):
                    raise IntegrityError(f"decoded an empty occupancy byte at level {lvl}")
                parents, occ = codes, new_occ
                codes = expand_children(codes, occ)
    finally:
        model.train(was_training)
    if len(codes) != bs.count:
        raise IntegrityError(f"decoded {len(codes)} points, header declares {bs.count}")
    return VoxelCloud(bs.depth, morton_decode(codes, bs.depth))


__all__ = [
    "SurrogateModel", "save_model", "load_model", "model_from_checkpoint", "level_features",
    "occupancy_bits", "network_levels", "LevelBatch", "masked_bits", "masked_bits_var",
    "slot_nats", "pretrain_loss", "pretrain_step", "predict_child_probs", "per_cloud_nats", "estimate_rate", "estimate_rates",
    "lossless_encode", "lossless_decode",
]
