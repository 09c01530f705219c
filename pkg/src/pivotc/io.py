"""PLY point cloud I/O and the PVTN bitstream container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerError, PlyParseError
from .geometry import PointCloud, dedup_sort, min_bit_depth

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_t, item_t))

    @property
    def has_list(self):
        return any(isinstance(t, tuple) for _, t in self.props)


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise PlyParseError("line 1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise PlyParseError(f"line {lineno}: header not terminated by end_header")
        tok = raw.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"line {lineno}: unsupported format {' '.join(tok[1:])!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_Element(tok[1], int(tok[2])))
            except (IndexError, ValueError):
                raise PlyParseError(f"line {lineno}: malformed element line") from None
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError(f"line {lineno}: property before element")
            try:
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            except (IndexError, KeyError):
                raise PlyParseError(f"line {lineno}: malformed property line") from None
        else:
            raise PlyParseError(f"line {lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise PlyParseError("header has no format line")
    return fmt, elements, lineno


def _read_vertices(path) -> np.ndarray:
    with open(path, "rb") as f:
        fmt, elements, header_lines = _parse_header(f)
        vertex = next((e for e in elements if e.name == "vertex"), None)
        if vertex is None:
            raise PlyParseError("no vertex element")
        names = [p for p, _ in vertex.props]
        for axis in "xyz":
            if axis not in names:
                raise PlyParseError(f"vertex element lacks property {axis!r}")
        cols = [names.index(a) for a in "xyz"]
        if fmt == "ascii":
            return _read_ascii(f, elements, vertex, cols, header_lines)
        return _read_binary(f, elements, vertex)


def _read_ascii(f, elements, vertex, cols, lineno):
    out = None
    for el in elements:
        rows = []
        for _ in range(el.count):
            raw = f.readline()
            lineno += 1
            if not raw:
                raise PlyParseError(f"line {lineno}: unexpected end of file in element {el.name!r}")
            if el is vertex:
                tok = raw.split()
                if len(tok) < len(el.props):
                    raise PlyParseError(f"line {lineno}: expected {len(el.props)} values")
                try:
                    rows.append([float(tok[c]) for c in cols])
                except ValueError:
                    raise PlyParseError(f"line {lineno}: non-numeric coordinate") from None
        if el is vertex:
            out = np.array(rows, dtype=np.float64).reshape(-1, 3)
            bad = ~np.isfinite(out).all(axis=1)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise PlyParseError(f"line {lineno - el.count + row + 1}: non-finite coordinate")
            return out
    return out


def _read_binary(f, elements, vertex):
    for el in elements:
        if el is vertex:
            if el.has_list:
                raise PlyParseError("list properties in vertex element are not supported")
            dt = np.dtype([(name, "<" + t) for name, t in el.props])
            offset = f.tell()
            buf = f.read(dt.itemsize * el.count)
            if len(buf) != dt.itemsize * el.count:
                raise PlyParseError(
                    f"byte offset {offset}: truncated vertex data "
                    f"({len(buf)} of {dt.itemsize * el.count} bytes)"
                )
            rec = np.frombuffer(buf, dtype=dt)
            out = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
            bad = ~np.isfinite(out).all(axis=1)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise PlyParseError(f"byte offset {offset + row * dt.itemsize}: non-finite coordinate")
            return out
        if el.has_list:
            raise PlyParseError(f"cannot skip binary list element {el.name!r} preceding vertices")
        f.seek(np.dtype([(n, "<" + t) for n, t in el.props]).itemsize * el.count, 1)
    return None


def read_ply(path, bit_depth: int | None = None) -> PointCloud:
    """Read x, y, z from an ASCII or binary little-endian PLY.

    Coordinates are rounded to integers, deduplicated and sorted. The bit
    depth is the smallest one covering the largest coordinate unless given.
    """
    xyz = _read_vertices(path)
    if len(xyz) and xyz.min() < -0.5:
        row = int(np.argmin(xyz.min(axis=1)))
        raise PlyParseError(f"vertex {row}: negative coordinate")
    pts = np.rint(xyz).astype(np.int64) if len(xyz) else np.zeros((0, 3), np.int64)
    n = bit_depth if bit_depth is not None else min_bit_depth(int(pts.max()) if len(pts) else 0)
    try:
        return dedup_sort(pts, n)
    except ValueError as exc:
        raise PlyParseError(str(exc)) from None


def write_ply(points, path, format: str = "binary") -> None:
    """Write a ``PointCloud`` (integer) or an (N, 3) real array as PLY."""
    if isinstance(points, PointCloud):
        arr, kind = points.points.astype(np.int32), "int"
    else:
        arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        kind = "double"
    if format not in ("ascii", "binary"):
        raise ValueError(f"unknown PLY format {format!r}")
    fmt_line = "ascii" if format == "ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {fmt_line} 1.0\nelement vertex {len(arr)}\n"
        f"property {kind} x\nproperty {kind} y\nproperty {kind} z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if format == "ascii":
            if kind == "int":
                lines = "\n".join(f"{x} {y} {z}" for x, y, z in arr.tolist())
            else:
                lines = "\n".join(f"{x!r} {y!r} {z!r}" for x, y, z in arr.tolist())
            f.write(lines.encode("ascii"))
            if len(arr):
                f.write(b"\n")
        else:
            f.write(arr.astype("<i4" if kind == "int" else "<f8").tobytes())


MAGIC = b"PVTN"
VERSION = 1
FLAG_POINT = 1
FLAG_VOXEL = 2
_HEAD = struct.Struct("<4sBBBBBBQ")


@dataclass(frozen=True)
class Container:
    """Parsed PVTN container: header fields plus the two payloads."""

    bit_depth: int
    n1_prime: int
    n1: int
    n2: int
    flags: int
    num_points: int
    stage_counts: tuple = ()
    part: bytes = b""
    feat: bytes = b""
    version: int = VERSION

    @property
    def point_stage(self) -> bool:
        return bool(self.flags & FLAG_POINT)

    @property
    def voxel_stage(self) -> bool:
        return bool(self.flags & FLAG_VOXEL)

    def validate(self) -> None:
        if self.version != VERSION:
            raise ContainerError(f"unsupported container version {self.version}")
        if not 1 <= self.bit_depth <= 32:
            raise ContainerError(f"bit depth {self.bit_depth} outside [1, 32]")
        if not 0 <= self.n1_prime <= self.n1 <= self.n2 <= self.bit_depth:
            raise ContainerError(
                f"interval ordering violated: n1'={self.n1_prime} n1={self.n1} "
                f"n2={self.n2} n={self.bit_depth}"
            )
        if self.flags & ~(FLAG_POINT | FLAG_VOXEL):
            raise ContainerError(f"unknown flag bits {self.flags:#x}")
        if self.point_stage != (self.n2 < self.bit_depth):
            raise ContainerError("point-stage flag disagrees with n2 < n")
        if self.voxel_stage != (self.n1 < self.n2):
            raise ContainerError("voxel-stage flag disagrees with n1 < n2")
        if len(self.stage_counts) != self.n2 - self.n1:
            raise ContainerError(
                f"{len(self.stage_counts)} stage counts for {self.n2 - self.n1} voxel stages"
            )
        if any(not 0 <= c < 1 << 32 for c in self.stage_counts):
            raise ContainerError("stage count outside u32")
        if not 1 <= self.num_points < 1 << 64:
            raise ContainerError(f"point count {self.num_points} outside [1, 2^64)")

    @property
    def nbytes(self) -> int:
        return _HEAD.size + 1 + 4 * len(self.stage_counts) + 8 + len(self.part) + len(self.feat)


def flags_for(n: int, n1: int, n2: int) -> int:
    return (FLAG_POINT if n2 < n else 0) | (FLAG_VOXEL if n1 < n2 else 0)


def pack_container(c: Container) -> bytes:
    c.validate()
    out = [
        _HEAD.pack(MAGIC, c.version, c.bit_depth, c.n1_prime, c.n1, c.n2, c.flags, c.num_points),
        struct.pack("<B", len(c.stage_counts)),
        struct.pack(f"<{len(c.stage_counts)}I", *c.stage_counts),
        struct.pack("<I", len(c.part)),
        bytes(c.part),
        struct.pack("<I", len(c.feat)),
        bytes(c.feat),
    ]
    return b"".join(out)


def unpack_container(data: bytes) -> Container:
    data = bytes(data)
    if len(data) < _HEAD.size + 1:
        raise ContainerError("container shorter than its header")
    magic, version, n, n1p, n1, n2, flags, num_points = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = _HEAD.size
    (ns,) = struct.unpack_from("<B", data, pos)
    pos += 1

    def take(k, what):
        nonlocal pos
        if pos + k > len(data):
            raise ContainerError(f"truncated {what}: need {k} bytes at offset {pos}")
        chunk = data[pos:pos + k]
        pos += k
        return chunk

    counts = struct.unpack(f"<{ns}I", take(4 * ns, "stage counts"))
    (plen,) = struct.unpack("<I", take(4, "part length"))
    part = take(plen, "partitioning payload")
    (flen,) = struct.unpack("<I", take(4, "feature length"))
    feat = take(flen, "feature payload")
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after feature payload")
    c = Container(n, n1p, n1, n2, flags, num_points, tuple(counts), part, feat, version)
    c.validate()
    return c
