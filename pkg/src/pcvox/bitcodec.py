"""Binary range coder with 16-bit fixed-point probabilities, and the .pvx container.

The coder keeps a 32-bit ``range`` and a carry-propagating ``low`` (LZMA
style). Probabilities are always integers ``p1`` in ``[1, 65535]`` giving
``P(bit = 1) = p1 / 65536``; nothing floating point crosses the encoder /
decoder boundary.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .errors import IntegrityError, TruncatedStreamError

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

MAGIC = b"PVX1"
CODEC_OCTREE = 0
CODEC_SURROGATE = 1


class AdaptiveBinModel:
    """Adaptive probability of a one bit, updated after each coded bit."""

    __slots__ = ("p1", "update_shift")

    def __init__(self, p1: int = PROB_ONE // 2, update_shift: int = 5):
        if not 1 <= p1 < PROB_ONE:
            raise ValueError("p1 must lie in [1, 65535]")
        self.p1 = p1
        self.update_shift = update_shift

    def update(self, bit: int) -> None:
        if bit:
            self.p1 += (PROB_ONE - self.p1) >> self.update_shift
        else:
            self.p1 -= self.p1 >> self.update_shift

    def __repr__(self):
        return f"AdaptiveBinModel(p1={self.p1}, update_shift={self.update_shift})"


def quantize_probability(p: float) -> int:
    """Map a probability of one to the coder's fixed-point grid."""
    return min(PROB_ONE - 1, max(1, int(round(p * PROB_ONE))))


def estimate_bits(p: float, bit: int) -> float:
    """Ideal code length of ``bit`` when ``P(1) = p``."""
    return -math.log2(p) if bit else -math.log2(1.0 - p)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._first = True
        self.finished = False

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._emit((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def _emit(self, byte):
        # the very first byte is always zero, the decoder does not need it
        if self._first:
            self._first = False
            return
        self._out.append(byte)

    def encode_bit_static(self, p1: int, bit: int) -> None:
        bound = (self.range * p1) >> PROB_BITS
        if bit:
            self.range = bound
        else:
            self.low += bound
            self.range -= bound
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, model: AdaptiveBinModel, bit: int) -> None:
        self.encode_bit_static(model.p1, bit)
        model.update(bit)

    def finish(self) -> bytes:
        if not self.finished:
            for _ in range(5):
                self._shift_low()
            self.finished = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._buf = payload
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._buf):
            raise TruncatedStreamError("range decoder ran past the end of the payload")
        b = self._buf[self._pos]
        self._pos += 1
        return b

    def decode_bit_static(self, p1: int) -> int:
        bound = (self.range * p1) >> PROB_BITS
        if self.code < bound:
            self.range = bound
            bit = 1
        else:
            self.code -= bound
            self.range -= bound
            bit = 0
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32
        return bit

    def decode_bit(self, model: AdaptiveBinModel) -> int:
        bit = self.decode_bit_static(model.p1)
        model.update(bit)
        return bit

    @property
    def consumed(self) -> int:
        return self._pos


# --------------------------------------------------------------------------
# container

_BASE = struct.Struct("<4sBBfQ")
_EXT = struct.Struct("<QB")
_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class Bitstream:
    """Parsed ``.pvx`` stream.

    Layout (little endian): magic ``PVX1``, codec id (u8), depth (u8), scale
    (f32), leaf point count (u64); for codec 1 a checkpoint hash (u64) and the
    coarse level count (u8); payload length (u32); payload.
    """

    codec_id: int
    depth: int
    scale: float
    count: int
    payload: bytes
    checkpoint_hash: int = 0
    coarse_levels: int = 0

    def to_bytes(self) -> bytes:
        head = _BASE.pack(MAGIC, self.codec_id, self.depth, self.scale, self.count)
        if self.codec_id == CODEC_SURROGATE:
            head += _EXT.pack(self.checkpoint_hash, self.coarse_levels)
        return head + _LEN.pack(len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _BASE.size + _LEN.size:
            raise IntegrityError("stream shorter than its header")
        magic, codec, depth, scale, count = _BASE.unpack_from(data, 0)
        if magic != MAGIC:
            raise IntegrityError(f"bad magic {magic!r}")
        off = _BASE.size
        ckpt, coarse = 0, 0
        if codec == CODEC_SURROGATE:
            if len(data) < off + _EXT.size + _LEN.size:
                raise IntegrityError("stream shorter than its header")
            ckpt, coarse = _EXT.unpack_from(data, off)
            off += _EXT.size
        elif codec != CODEC_OCTREE:
            raise IntegrityError(f"unknown codec id {codec}")
        (length,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        payload = bytes(data[off:off + length])
        if len(payload) != length:
            raise TruncatedStreamError(f"payload declares {length} bytes, found {len(payload)}")
        return cls(codec, depth, scale, count, payload, ckpt, coarse)

    @property
    def header_bytes(self) -> int:
        return len(self.to_bytes()) - len(self.payload)
