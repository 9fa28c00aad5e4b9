"""Voxelization network: compression-oriented editing of a quantized cloud.

The scaled input is downsampled once by a K=2, s=2 convolution, processed at
parent resolution, and dilated back to all eight children of every parent by
a single transposed convolution. A 1x1x1 head scores each candidate child and
the hard decision ``p >= 0.5`` (``ste_round``) decides which children are
emitted. Removing every child of a parent prunes that subtree; emitting a
child that was not in the scaled input adds a point.

For training, the emitted bits feed the frozen surrogate's last octree level,
so the rate term's gradient reaches the classifier through the straight
through estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointMismatchError, ConfigurationError, TrainingDivergedError
from .pcgeom import VoxelCloud, group_children, morton_codes, quantize
from .sparsenn import (Linear, Module, SConvBlock, SparseTensor, Tape, TransposedConv,
                       Variable, backward, checkpoint, count_flops, no_grad, ops, trace_flops)
from .sparsenn.tensor import CoordSet
from . import surrogate as sur

UPSAMPLE_MODES = ("back", "mid")


class VoxNetModel(Module):
    """Down conv, ``blocks`` SConvBlocks, transposed conv, 1x1x1 head.

    ``upsample="back"`` (the deployed model) runs every block at parent
    resolution. ``upsample="mid"`` moves the transposed convolution after the
    first block so the remaining blocks run on the dilated children; it exists
    for the FLOPs comparison and :func:`voxelize` refuses it.
    """

    def __init__(self, channels: int = 32, blocks: int = 2, upsample: str = "back", seed: int = 0):
        if upsample not in UPSAMPLE_MODES:
            raise ConfigurationError(f"upsample must be one of {UPSAMPLE_MODES}, got {upsample!r}")
        if blocks < 1:
            raise ConfigurationError("voxnet needs at least one feature block")
        rng = np.random.default_rng(seed)
        self._channels = channels
        self._upsample = upsample
        self.down = SConvBlock(1, channels, kernel_size=2, stride=2, rng=rng)
        self.blocks = [SConvBlock(channels, channels, rng=rng) for _ in range(blocks)]
        self.up = TransposedConv(channels, channels, rng=rng)
        self.head = Linear(channels, 1, rng=rng)

    @property
    def channels(self) -> int:
        return self._channels

    @property
    def upsample(self) -> str:
        return self._upsample

    def descriptor(self) -> dict:
        return {"arch": "voxnet", "channels": self._channels, "blocks": len(self.blocks),
                "upsample": self._upsample}

    def layer_plan(self) -> List[Tuple[str, str]]:
        """``(layer, effect on resolution)`` in execution order."""
        n_before = len(self.blocks) if self._upsample == "back" else 1
        plan = [("down", "down")]
        plan += [(f"blocks.{i}", "same") for i in range(n_before)]
        plan.append(("up", "up"))
        plan += [(f"blocks.{i}", "same") for i in range(n_before, len(self.blocks))]
        plan.append(("head", "same"))
        return plan

    def is_backloaded(self) -> bool:
        """True when the transposed conv is the only upsampling and only the head follows it."""
        plan = self.layer_plan()
        ups = [i for i, (_, effect) in enumerate(plan) if effect == "up"]
        return len(ups) == 1 and [name for name, _ in plan[ups[0] + 1:]] == ["head"]

    def __call__(self, st: SparseTensor) -> SparseTensor:
        """Logits, one row per candidate child (rows ``8p .. 8p+7`` for parent ``p``)."""
        layers = {"down": self.down, "up": self.up, "head": self.head}
        layers.update({f"blocks.{i}": b for i, b in enumerate(self.blocks)})
        for name, effect in self.layer_plan():
            st = layers[name](st)
            if name == "up":
                st = st.with_feats(ops.relu(st.feats))
        return st

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.descriptor(), self.state_dict())


def save_model(model: VoxNetModel, path: Union[str, Path]) -> bytes:
    return checkpoint.save(path, model.descriptor(), model.state_dict())


def load_model(path: Union[str, Path]) -> VoxNetModel:
    desc, tensors = checkpoint.load(path)
    if desc.get("arch") != "voxnet":
        raise CheckpointMismatchError(f"checkpoint holds a {desc.get('arch')!r} model")
    model = VoxNetModel(desc["channels"], desc["blocks"], desc["upsample"])
    model.load_state_dict(tensors)
    return model.eval()


# ------------------------------------------------------------ classification

@dataclass
class ClassifiedChildren:
    """Candidate children of every parent of a (batched) scaled input.

    ``probs`` and ``bits`` are ``(N_p, 8)`` Variables: column ``i`` is child
    ``i`` of parent row ``p`` and ``candidates`` row ``8p + i`` its coordinate.
    ``child_rows`` maps each candidate to its row in the scaled input, or -1.
    """

    parents: CoordSet
    probs: Variable
    bits: Variable
    child_rows: np.ndarray  # (N_p, 8)
    depth: int

    @property
    def candidates(self) -> np.ndarray:
        return self.parents.upsample().coords

    @property
    def targets(self) -> np.ndarray:
        """Occupancy bits of the scaled input for every candidate."""
        return (self.child_rows >= 0).astype(np.float32)


def input_tensor(clouds: Sequence[VoxelCloud]) -> SparseTensor:
    coords = np.concatenate([vc.coords for vc in clouds])
    batch = np.concatenate([np.full(len(vc), b, np.int64) for b, vc in enumerate(clouds)])
    return SparseTensor.build(coords, np.ones((len(coords), 1)), batch)


def classify(model: VoxNetModel, clouds: Sequence[VoxelCloud]) -> ClassifiedChildren:
    """Run the network on scaled clouds (all of one depth); records on an active tape."""
    depths = {vc.depth for vc in clouds}
    if len(depths) != 1:
        raise ValueError(f"a batch must share one depth, got {sorted(depths)}")
    st = input_tensor(clouds)
    parents, child_rows = st.cs.downsample()
    logits = model(st)
    probs = ops.reshape(ops.sigmoid(logits.feats), (len(parents), 8))
    return ClassifiedChildren(parents, probs, ops.ste_round(probs), child_rows, depths.pop())


def emitted_clouds(cc: ClassifiedChildren, n_clouds: int) -> List[VoxelCloud]:
    """The occupied candidates of every batch item (possibly empty)."""
    keep = cc.bits.data.reshape(-1) >= 0.5
    cands = cc.candidates[keep]
    batch = np.repeat(cc.parents.batch, 8)[keep]
    return [VoxelCloud.from_coords(cands[batch == b], cc.depth) for b in range(n_clouds)]


@dataclass
class VoxelizeResult:
    cloud: VoxelCloud
    scaled: VoxelCloud
    degenerate: bool


def voxelize_detailed(model: VoxNetModel, pc, scale: float, depth: int) -> VoxelizeResult:
    if not model.is_backloaded():
        raise ConfigurationError("only the back-loaded model can be deployed")
    scaled = quantize(pc, scale, depth)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = emitted_clouds(classify(model, [scaled]), 1)[0]
    finally:
        model.train(was_training)
    if len(out) == 0:
        warnings.warn("voxnet pruned every candidate; falling back to the scaled input",
                      RuntimeWarning, stacklevel=2)
        return VoxelizeResult(scaled, scaled, True)
    return VoxelizeResult(out, scaled, False)


def voxelize(model: VoxNetModel, pc, scale: float, depth: int) -> VoxelCloud:
    """quantize, downsample, back-loaded upsample, threshold at 0.5."""
    return voxelize_detailed(model, pc, scale, depth).cloud


def flops(model: VoxNetModel, vc: VoxelCloud) -> int:
    """Convolution FLOPs of one forward pass on ``vc``."""
    with no_grad(), trace_flops() as trace:
        model(input_tensor([vc]))
    return count_flops(trace)


# -------------------------------------------------------------------- losses

def distortion_loss(cc: ClassifiedChildren) -> Variable:
    """BCE (nats) between the scaled input's child bits and ``p^c`` over every candidate."""
    return ops.bce(cc.probs, cc.targets)


def rate_terms(surrogate: sur.SurrogateModel, cc: ClassifiedChildren,
               n_clouds: int) -> Tuple[Variable, np.ndarray]:
    """Surrogate rate of the emitted clouds.

    Returns the last level's BCE in nats as a Variable that depends on the
    hard bits, and the estimated bits of every cloud over all levels. Levels
    above the last do not depend on the bits and are evaluated without
    recording.
    """
    bits = cc.bits.data
    live = np.flatnonzero(bits.sum(1) > 0)
    lvl = cc.depth - 1  # octree level of the parents
    per_cloud = np.zeros(n_clouds)
    live_batch = cc.parents.batch[live]
    present = np.unique(live_batch)
    if lvl and len(present):
        # the parents alone form a depth-``lvl`` cloud whose octree is the upper levels
        uppers = [VoxelCloud.from_coords(cc.parents.coords[live[live_batch == b]], lvl)
                  for b in present]
        per_cloud[present] = sur.estimate_rates(surrogate, uppers)
    if lvl < surrogate.coarse_levels or len(live) == 0:
        # the last level is coded with adaptive contexts: one bit per slot, no gradient
        per_cloud += 8 * np.bincount(live_batch, minlength=n_clouds)
        return Variable(np.zeros(())), per_cloud
    cs = cc.parents.subset(live)
    codes = morton_codes(cs.coords, lvl)
    feats = np.zeros((len(live), sur.IN_CHANNELS), np.float32)
    for b in present:
        rows = np.flatnonzero(cs.batch == b)
        gp, occ = group_children(codes[rows])
        feats[rows] = sur.level_features(codes[rows], gp, occ)
    bits_live = ops.take_rows(cc.bits, live)
    nats = sur.slot_nats(surrogate, SparseTensor(cs, Variable(feats)), bits_live)
    per_cloud += np.bincount(cs.batch, weights=nats.data.astype(np.float64).sum(1),
                             minlength=n_clouds) / sur.LN2
    cost = ops.matmul(nats, Variable(np.ones((8, 1), nats.data.dtype)))  # per parent
    return ops.total(ops.mul(liveness(bits_live), cost)), per_cloud


def liveness(bits: Variable) -> Variable:
    """``1 - prod_i (1 - b_i)`` per row, shape ``(N, 1)``: 1 iff any child is emitted.

    Equal to 1 on every live parent, so weighting a parent's cost by it does
    not change the rate. Its gradient is nonzero only for a parent's last
    remaining child, which then sees the cost of the whole parent: the
    saving of pruning that subtree.
    """
    empty = ops.add(ops.scale(bits, -1.0), Variable(np.ones_like(bits.data)))
    prod = ops.take_cols(empty, [0])
    for i in range(1, 8):
        prod = ops.mul(prod, ops.take_cols(empty, [i]))
    return ops.add(ops.scale(prod, -1.0), Variable(np.ones_like(prod.data)))


@dataclass
class JointLoss:
    loss: Variable
    distortion: float  # nats
    rate_bits: np.ndarray  # per cloud, all levels
    points: np.ndarray  # emitted points per cloud


def joint_loss(voxnet: VoxNetModel, surrogate: sur.SurrogateModel,
               clouds: Sequence[VoxelCloud], lam: float) -> JointLoss:
    """``distortion + lam * rate`` in nats.

    The surrogate is frozen: put in eval mode with gradients disabled.
    """
    surrogate.eval().requires_grad_(False)
    cc = classify(voxnet, clouds)
    dist = distortion_loss(cc)
    last, rate_bits = rate_terms(surrogate, cc, len(clouds))
    loss = ops.add(dist, ops.scale(last, lam)) if lam else dist
    points = np.bincount(np.repeat(cc.parents.batch, 8), weights=cc.bits.data.reshape(-1),
                         minlength=len(clouds)).astype(np.int64)
    return JointLoss(loss, dist.item(), rate_bits, points)


def joint_train_step(voxnet: VoxNetModel, surrogate: sur.SurrogateModel, optimizer,
                     clouds: Sequence[VoxelCloud], lam: float) -> JointLoss:
    """One Adam step on the joint loss; the surrogate's parameters are never touched."""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    voxnet.train()
    optimizer.zero_grad()
    with Tape() as tape:
        out = joint_loss(voxnet, surrogate, clouds, lam)
    if not np.isfinite(out.loss.item()):
        raise TrainingDivergedError(f"joint loss is {out.loss.item()}")
    backward(tape, out.loss)
    optimizer.step()
    return out


# ------------------------------------------------------------------- editing

@dataclass(frozen=True)
class PruneReport:
    added: int
    removed: int
    pruned_parents: int


def prune_region_report(before: VoxelCloud, after: VoxelCloud) -> PruneReport:
    """Points added and removed, and parents of ``before`` left with no child at all."""
    if before.depth != after.depth:
        raise ValueError(f"depth mismatch: {before.depth} vs {after.depth}")
    a, b = before.codes, after.codes
    added = np.setdiff1d(b, a, assume_unique=True)
    removed = np.setdiff1d(a, b, assume_unique=True)
    pruned = np.setdiff1d(np.unique(a >> 3), np.unique(b >> 3), assume_unique=True)
    return PruneReport(len(added), len(removed), len(pruned))


__all__ = [
    "VoxNetModel", "ClassifiedChildren", "VoxelizeResult", "JointLoss", "PruneReport",
    "UPSAMPLE_MODES", "save_model", "load_model", "input_tensor", "classify", "emitted_clouds",
    "voxelize", "voxelize_detailed", "flops", "distortion_loss", "rate_terms", "liveness", "joint_loss",
    "joint_train_step", "prune_region_report",
]
