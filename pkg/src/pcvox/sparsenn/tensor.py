"""Sparse voxel tensors and the kernel maps that drive sparse convolution.

Coordinates from several clouds share one tensor through a batch index. Each
row is keyed by ``(batch << 48) | morton(coord)``, so rows of one cloud are
contiguous and Morton ordered, and neighbour lookups reduce to a
``searchsorted`` over the sorted keys.
"""

from __future__ import annotations

import itertools
from typing import Dict, Optional, Tuple

import numpy as np

from ..pcgeom.cloud import MAX_DEPTH, morton_codes
from .autograd import Variable

KEY_SHIFT = 3 * MAX_DEPTH
_COORD_LIMIT = 1 << MAX_DEPTH


def make_keys(coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
    return (np.asarray(batch, np.int64) << KEY_SHIFT) | morton_codes(coords, MAX_DEPTH)


def _linear_keys(coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Row-major key; cheaper than Morton and only used for exact-match lookups."""
    c = np.asarray(coords, dtype=np.int64)
    return (((np.asarray(batch, np.int64) << MAX_DEPTH | c[:, 0]) << MAX_DEPTH | c[:, 1])
            << MAX_DEPTH) | c[:, 2]


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offsets of a stride-1 kernel in lexicographic (dx, dy, dz) order.

    Odd sizes are centred; size 2 covers ``{0, 1}``.
    """
    lo = -((kernel_size - 1) // 2)
    r = range(lo, lo + kernel_size)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


# child slot i = (x << 2) | (y << 1) | z
CHILD_OFFSETS = np.array([((i >> 2) & 1, (i >> 1) & 1, i & 1) for i in range(8)], dtype=np.int64)


class CoordSet:
    """Sorted unique (batch, coordinate) rows plus cached kernel maps."""

    def __init__(self, coords: np.ndarray, batch: Optional[np.ndarray] = None, keys=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if batch is None:
            batch = np.zeros(len(coords), dtype=np.int64)
        batch = np.asarray(batch, dtype=np.int64)
        if keys is None:
            keys = make_keys(coords, batch)
        self.coords = coords
        self.batch = batch
        self.keys = keys
        self._maps: Dict[Tuple, object] = {}

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_unsorted(cls, coords, batch=None) -> Tuple["CoordSet", np.ndarray]:
        """Sort and deduplicate; returns the set and the index of each kept row."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if batch is None:
            batch = np.zeros(len(coords), dtype=np.int64)
        keys = make_keys(coords, batch)
        keys, first = np.unique(keys, return_index=True)
        return cls(coords[first], np.asarray(batch, np.int64)[first], keys), first

    def _linear_index(self):
        if "lin" not in self._maps:
            lin = _linear_keys(self.coords, self.batch)
            order = np.argsort(lin, kind="stable")
            self._maps["lin"] = (lin[order], order)
        return self._maps["lin"]

    def lookup(self, coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 when absent."""
        coords = np.asarray(coords, dtype=np.int64)
        valid = np.all((coords >= 0) & (coords < _COORD_LIMIT), axis=1)
        out = np.full(len(coords), -1, dtype=np.int64)
        if not valid.any() or len(self.keys) == 0:
            return out
        sorted_lin, order = self._linear_index()
        q = _linear_keys(coords[valid], np.asarray(batch)[valid])
        pos = np.minimum(np.searchsorted(sorted_lin, q), len(sorted_lin) - 1)
        hit = sorted_lin[pos] == q
        out[np.flatnonzero(valid)[hit]] = order[pos[hit]]
        return out

    def neighbour_map(self, kernel_size: int) -> np.ndarray:
        """(N, K^3) input row per output row and kernel offset, -1 if unoccupied."""
        key = ("nbr", kernel_size)
        if key not in self._maps:
            offs = kernel_offsets(kernel_size)
            if kernel_size == 1:
                kmap = np.arange(len(self), dtype=np.int64)[:, None]
            else:
                kmap = np.empty((len(self), len(offs)), dtype=np.int64)
                for k, d in enumerate(offs):
                    kmap[:, k] = self.lookup(self.coords + d, self.batch)
            self._maps[key] = kmap
        return self._maps[key]

    def downsample(self) -> Tuple["CoordSet", np.ndarray]:
        """Parent set (coord // 2) and its (N_p, 8) child-row map."""
        if "down" not in self._maps:
            pkeys = (self.batch << KEY_SHIFT) | (self.keys & ((1 << KEY_SHIFT) - 1)) >> 3
            ukeys, first = np.unique(pkeys, return_index=True)
            parents = CoordSet(self.coords[first] >> 1, self.batch[first], ukeys)
            kmap = np.empty((len(parents), 8), dtype=np.int64)
            for i, d in enumerate(CHILD_OFFSETS):
                kmap[:, i] = self.lookup(parents.coords * 2 + d, parents.batch)
            self._maps["down"] = (parents, kmap)
        return self._maps["down"]

    def upsample(self) -> "CoordSet":
        """All eight children of every row, in key order (rows 8p .. 8p+7)."""
        if "up" not in self._maps:
            local = self.keys & ((1 << KEY_SHIFT) - 1)
            ckeys = ((self.batch << KEY_SHIFT)[:, None]
                     | (local[:, None] << 3) | np.arange(8, dtype=np.int64)).reshape(-1)
            coords = (self.coords[:, None, :] * 2 + CHILD_OFFSETS).reshape(-1, 3)
            self._maps["up"] = CoordSet(coords, np.repeat(self.batch, 8), ckeys)
        return self._maps["up"]

    def subset(self, rows: np.ndarray) -> "CoordSet":
        rows = np.asarray(rows, dtype=np.int64)
        return CoordSet(self.coords[rows], self.batch[rows], self.keys[rows])


class SparseTensor:
    """Features attached to a :class:`CoordSet`; one row per coordinate."""

    def __init__(self, cs: CoordSet, feats: Variable):
        if not isinstance(feats, Variable):
            feats = Variable(feats)
        if feats.data.ndim != 2 or feats.data.shape[0] != len(cs):
            raise ValueError(f"feature rows {feats.data.shape} do not match {len(cs)} coordinates")
        self.cs = cs
        self.feats = feats

    @classmethod
    def build(cls, coords, feats, batch=None, dtype=np.float32, requires_grad=False) -> "SparseTensor":
        """Sort arbitrary rows into key order; duplicate coordinates keep the first row."""
        cs, first = CoordSet.from_unsorted(coords, batch)
        f = np.asarray(feats, dtype=dtype)[first]
        return cls(cs, Variable(f, requires_grad=requires_grad))

    def with_feats(self, feats: Variable) -> "SparseTensor":
        return SparseTensor(self.cs, feats)

    @property
    def coords(self) -> np.ndarray:
        return self.cs.coords

    @property
    def batch(self) -> np.ndarray:
        return self.cs.batch

    @property
    def F(self) -> np.ndarray:
        return self.feats.data

    @property
    def channels(self) -> int:
        return self.feats.data.shape[1]

    def __len__(self):
        return len(self.cs)

    def __repr__(self):
        return f"SparseTensor(n={len(self)}, channels={self.channels})"


__all__ = ["CoordSet", "SparseTensor", "kernel_offsets", "make_keys", "CHILD_OFFSETS",
           "KEY_SHIFT"]
