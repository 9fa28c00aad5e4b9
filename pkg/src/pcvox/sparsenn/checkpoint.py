"""PVNN parameter files.

Layout (little endian)::

    b"PVNN" | u16 version | u32 descriptor length | descriptor (UTF-8 JSON)
    | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
      u32 dims..., float32 data

Tensors are written in sorted name order so identical models give identical
bytes, and therefore identical hashes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..errors import IntegrityError

MAGIC = b"PVNN"
VERSION = 1


def dumps(descriptor: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    desc = json.dumps(descriptor, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(desc)) + desc)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise IntegrityError("checkpoint truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise IntegrityError("not a PVNN checkpoint")
    version, dlen = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    descriptor = json.loads(bytes(take(dlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise IntegrityError("trailing bytes after checkpoint")
    return descriptor, tensors


def save(path: Union[str, Path], descriptor: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    data = dumps(descriptor, tensors)
    Path(path).write_bytes(data)
    return data


def load(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def checkpoint_hash(data: bytes) -> int:
    """64-bit BLAKE2b digest of the serialized checkpoint."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")
