"""Minimal PLY 1.0 reader/writer for point geometry (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from typing import List, Tuple, Union

import numpy as np

from ..errors import PlyParseError, UnsupportedFormatError
from .cloud import PointCloud, VoxelCloud

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.props: List[Tuple[str, str]] = []
        self.has_list = False


def _parse_header(fh):
    line_no = 0

    def next_line():
        nonlocal line_no
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise PlyParseError("unexpected end of header", line_no)
        try:
            return raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyParseError("non-ASCII header line", line_no) from None

    if next_line() != "ply":
        raise PlyParseError("missing 'ply' magic", line_no)
    fmt = None
    elements: List[_Element] = []
    while True:
        line = next_line()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) != 3:
                raise PlyParseError("malformed format line", line_no)
            fmt = tok[1]
            if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyParseError(f"unknown format '{fmt}'", line_no)
            if fmt == "binary_big_endian":
                raise UnsupportedFormatError("binary_big_endian PLY is not supported")
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError("malformed element line", line_no)
            elements.append(_Element(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line_no)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise PlyParseError("malformed list property", line_no)
                elements[-1].has_list = True
                elements[-1].props.append((tok[4], "list"))
                continue
            if len(tok) != 3:
                raise PlyParseError("malformed property line", line_no)
            if tok[1] not in _TYPES:
                raise UnsupportedFormatError(f"unsupported property type '{tok[1]}' (line {line_no})")
            elements[-1].props.append((tok[2], _TYPES[tok[1]]))
        else:
            raise PlyParseError(f"unexpected header keyword '{tok[0]}'", line_no)
    if fmt is None:
        raise PlyParseError("header has no format line", line_no)
    return fmt, elements, line_no


def read_ply(path: Union[str, os.PathLike]) -> PointCloud:
    """Read vertex positions (and unit-renormalized normals, if present)."""
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_header(fh)
        vertex = next((e for e in elements if e.name == "vertex"), None)
        if vertex is None:
            raise PlyParseError("no vertex element", header_lines)
        names = [p[0] for p in vertex.props]
        for axis in "xyz":
            if axis not in names:
                raise PlyParseError(f"vertex element lacks property '{axis}'", header_lines)
        if vertex.has_list:
            raise UnsupportedFormatError("list properties on vertices are not supported")

        if fmt == "ascii":
            data = _read_ascii(fh, elements, vertex, header_lines)
        else:
            data = _read_binary(fh, elements, vertex)

    points = np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1)
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.stack([data[a].astype(np.float64) for a in ("nx", "ny", "nz")], axis=1)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norm > 0, normals / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    return PointCloud(points, normals)


def _read_ascii(fh, elements, vertex, header_lines):
    line_no = header_lines
    for el in elements:
        if el is vertex:
            break
        for _ in range(el.count):
            fh.readline()
            line_no += 1
    rows = []
    for _ in range(vertex.count):
        raw = fh.readline()
        line_no += 1
        tok = raw.split()
        if len(tok) < len(vertex.props):
            raise PlyParseError("truncated vertex row", line_no)
        rows.append(tok[: len(vertex.props)])
    arr = np.array(rows, dtype=object).reshape(vertex.count, len(vertex.props))
    out = {}
    for j, (name, dt) in enumerate(vertex.props):
        try:
            out[name] = arr[:, j].astype(np.float64).astype(dt)
        except ValueError:
            raise PlyParseError(f"non-numeric value for property '{name}'", line_no) from None
    return out


def _read_binary(fh, elements, vertex):
    for el in elements:
        if el is vertex:
            break
        if el.has_list:
            raise UnsupportedFormatError(f"cannot skip element '{el.name}' with list properties")
        size = sum(np.dtype(dt).itemsize for _, dt in el.props)
        fh.seek(size * el.count, os.SEEK_CUR)
    dtype = np.dtype([(name, "<" + dt) for name, dt in vertex.props])
    buf = fh.read(dtype.itemsize * vertex.count)
    if len(buf) != dtype.itemsize * vertex.count:
        raise PlyParseError("binary vertex data is truncated")
    rec = np.frombuffer(buf, dtype=dtype)
    return {name: rec[name] for name, _ in vertex.props}


def write_ply(cloud: Union[VoxelCloud, PointCloud], path, format: str = "binary") -> None:
    """Voxel clouds are written as int32 coordinates, point clouds as float32."""
    if format not in ("ascii", "binary"):
        raise ValueError("format must be 'ascii' or 'binary'")
    if isinstance(cloud, VoxelCloud):
        cols = [("x", "i4", "int"), ("y", "i4", "int"), ("z", "i4", "int")]
        values = [cloud.coords[:, k] for k in range(3)]
    else:
        cols = [("x", "f4", "float"), ("y", "f4", "float"), ("z", "f4", "float")]
        values = [cloud.points[:, k] for k in range(3)]
        if cloud.normals is not None:
            cols += [("nx", "f4", "float"), ("ny", "f4", "float"), ("nz", "f4", "float")]
            values += [cloud.normals[:, k] for k in range(3)]
    n = len(values[0])
    header = ["ply", f"format {'ascii' if format == 'ascii' else 'binary_little_endian'} 1.0",
              f"element vertex {n}"]
    header += [f"property {ply_t} {name}" for name, _, ply_t in cols]
    header.append("end_header")
    rec = np.empty(n, dtype=[(name, "<" + dt) for name, dt, _ in cols])
    for (name, _, _), v in zip(cols, values):
        rec[name] = v
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if format == "binary":
            fh.write(rec.tobytes())
        else:
            fmts = ["%d" if dt == "i4" else "%.9g" for _, dt, _ in cols]
            lines = [" ".join(f % v for f, v in zip(fmts, row)) for row in rec.tolist()]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def read_voxels(path, depth: int) -> VoxelCloud:
    """Read a PLY whose coordinates are already integer voxels."""
    pc = read_ply(path)
    return VoxelCloud.from_coords(np.rint(pc.points).astype(np.int64), depth)
