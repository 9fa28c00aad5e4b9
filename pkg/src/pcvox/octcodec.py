"""Lossless octree geometry codec with neighbour-pattern contexts.

Occupancy bytes are coded breadth first (root to leaves, parents in Morton
order), each byte as eight binary decisions ``b_0..b_7``. The context of
``b_i`` combines the six face neighbours of the parent, the siblings already
coded and ``i`` itself, concentrated into a fixed table of adaptive models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .bitcodec import (CODEC_OCTREE, AdaptiveBinModel, Bitstream, RangeDecoder,
                       RangeEncoder)
from .errors import IntegrityError
from .pcgeom import VoxelCloud, build_octree, expand_children, morton_codes, morton_decode

TABLE_BITS = 14
TABLE_SIZE = 1 << TABLE_BITS

# bit k of parent6 <-> face neighbour _FACE_OFFSETS[k]
_FACE_OFFSETS = np.array(
    [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class NeighbourPattern:
    parent6: int
    sibling_mask: int
    child_idx: int

    def __post_init__(self):
        if self.sibling_mask >> self.child_idx:
            raise ValueError("sibling mask references siblings not yet coded")


def face_neighbours(parent_codes: np.ndarray) -> np.ndarray:
    """6-bit face-neighbour occupancy of every parent within its own level."""
    codes = np.asarray(parent_codes, dtype=np.int64)
    coords = morton_decode(codes)
    out = np.zeros(len(codes), dtype=np.int64)
    if len(codes) == 0:
        return out
    for k, off in enumerate(_FACE_OFFSETS):
        nb = coords + off
        inside = np.all(nb >= 0, axis=1)
        nb_codes = morton_codes(np.where(inside[:, None], nb, 0))
        pos = np.searchsorted(codes, nb_codes)
        pos = np.minimum(pos, len(codes) - 1)
        hit = inside & (codes[pos] == nb_codes)
        out |= hit.astype(np.int64) << k
    return out


def compute_neighbour_pattern(levels, level_idx: int, parent_pos: int, child_idx: int,
                              coded_siblings: int) -> NeighbourPattern:
    """Pattern for child ``child_idx`` of parent number ``parent_pos`` of a level.

    ``coded_siblings`` is the occupancy byte decided so far; only its bits
    below ``child_idx`` are used.
    """
    codes = levels[level_idx].codes
    parent6 = int(face_neighbours(codes)[parent_pos])
    mask = coded_siblings & ((1 << child_idx) - 1)
    return NeighbourPattern(parent6, mask, child_idx)


def context_index(pat: NeighbourPattern) -> int:
    return _ctx(pat.parent6, pat.sibling_mask, pat.child_idx)


def _ctx(parent6: int, mask: int, i: int) -> int:
    # every (mask, i) pair with mask < 2^i gets its own slot: 255 per parent6 value
    return parent6 * 255 + (1 << i) - 1 + mask


class ContextTable:
    def __init__(self, update_shift: int = 5):
        self.models = [AdaptiveBinModel(update_shift=update_shift) for _ in range(TABLE_SIZE)]
        self.root = [AdaptiveBinModel(update_shift=update_shift) for _ in range(8)]

    def model(self, parent6: int, mask: int, i: int) -> AdaptiveBinModel:
        return self.models[_ctx(parent6, mask, i)]


class _SingleModel:
    """Context-free reference: one adaptive model for every bit."""

    def __init__(self):
        self.only = AdaptiveBinModel()
        self.root = [self.only] * 8
        self.models = self

    def __getitem__(self, ctx):
        return self.only


def encode_levels(enc: RangeEncoder, levels, table, trace: Optional[list] = None) -> None:
    """Code the occupancy bytes of ``levels`` (root first) into ``enc``."""
    for lvl, level in enumerate(levels):
        occ = level.occupancy.tolist()
        p6 = [0] if lvl == 0 else face_neighbours(level.codes).tolist()
        for j, byte in enumerate(occ):
            mask = 0
            for i in range(8):
                bit = (byte >> i) & 1
                if lvl == 0:
                    model = table.root[i]
                    ctx = -1 - i
                else:
                    ctx = _ctx(p6[j], mask, i)
                    model = table.models[ctx]
                if trace is not None:
                    trace.append((lvl, j, i, ctx, model.p1, bit))
                enc.encode_bit(model, bit)
                mask |= bit << i


def decode_levels(dec: RangeDecoder, n_levels: int, count: int, table,
                  trace: Optional[list] = None):
    """Inverse of :func:`encode_levels`.

    Returns the Morton codes of the nodes below the last decoded level, plus
    that level's parent codes and occupancy bytes. ``count`` bounds the node
    count of every level.
    """
    codes = np.zeros(1, dtype=np.int64)
    occ = np.zeros(0, dtype=np.uint8)
    parents = codes
    for lvl in range(n_levels):
        if len(codes) > count:
            raise IntegrityError(f"level {lvl} has more nodes than the declared point count")
        p6 = [0] if lvl == 0 else face_neighbours(codes).tolist()
        occ = np.empty(len(codes), dtype=np.uint8)
        for j in range(len(codes)):
            mask = 0
            for i in range(8):
                if lvl == 0:
                    model = table.root[i]
                    ctx = -1 - i
                else:
                    ctx = _ctx(p6[j], mask, i)
                    model = table.models[ctx]
                p1 = model.p1
                bit = dec.decode_bit(model)
                if trace is not None:
                    trace.append((lvl, j, i, ctx, p1, bit))
                mask |= bit << i
            if mask == 0:
                raise IntegrityError(f"decoded an empty occupancy byte at level {lvl}")
            occ[j] = mask
        parents = codes
        codes = expand_children(codes, occ)
    return codes, parents, occ


def _encode_tree(vc: VoxelCloud, table, trace: Optional[list] = None) -> bytes:
    enc = RangeEncoder()
    encode_levels(enc, build_octree(vc).levels, table, trace)
    return enc.finish()


def _decode_tree(payload: bytes, depth: int, count: int, table, trace: Optional[list] = None) -> VoxelCloud:
    codes, _, _ = decode_levels(RangeDecoder(payload), depth, count, table, trace)
    if len(codes) != count:
        raise IntegrityError(f"decoded {len(codes)} points, header declares {count}")
    return VoxelCloud(depth, morton_decode(codes, depth))


def encode(vc: VoxelCloud, scale: float = 1.0, trace: Optional[list] = None) -> Bitstream:
    payload = _encode_tree(vc, ContextTable(), trace)
    return Bitstream(CODEC_OCTREE, vc.depth, float(scale), len(vc), payload)


def decode(bs: Bitstream, trace: Optional[list] = None) -> VoxelCloud:
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bs)
    if bs.codec_id != CODEC_OCTREE:
        raise IntegrityError(f"not an octree stream (codec id {bs.codec_id})")
    return _decode_tree(bs.payload, bs.depth, bs.count, ContextTable(), trace)


def encode_context_free(vc: VoxelCloud) -> bytes:
    """Payload of the same traversal coded with a single adaptive model."""
    return _encode_tree(vc, _SingleModel())


def decode_context_free(payload: bytes, depth: int, count: int) -> VoxelCloud:
    return _decode_tree(payload, depth, count, _SingleModel())


def bits_per_point(nbytes: int, npoints: int) -> float:
    return 8.0 * nbytes / npoints


__all__: List[str] = [
    "NeighbourPattern", "ContextTable", "TABLE_SIZE",
    "face_neighbours", "compute_neighbour_pattern", "context_index",
    "encode_levels", "decode_levels", "encode", "decode", "encode_context_free", "decode_context_free", "bits_per_point",
]
