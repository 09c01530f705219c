"""Integer point clouds, power-of-two quantization and canonical ordering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoordinateRangeError, InvalidStepError

COORD_DTYPE = np.uint32


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def lex_order(coords: np.ndarray) -> np.ndarray:
    """Permutation that sorts ``coords`` lexicographically by (x, y, z)."""
    coords = np.asarray(coords)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def unique_rows(coords: np.ndarray) -> np.ndarray:
    """Unique rows of an integer (N, 3) array in lexicographic order."""
    coords = np.asarray(coords)
    if len(coords) == 0:
        return coords.reshape(0, 3)
    # np.unique(axis=0) sorts rows lexicographically
    return np.unique(coords, axis=0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A deduplicated, lexicographically sorted integer point set.

    Use :func:`dedup_sort` to build one from arbitrary coordinates; the
    constructor only validates.
    """

    points: np.ndarray
    bit_depth: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=COORD_DTYPE).reshape(-1, 3)
        if self.bit_depth < 1 or self.bit_depth > 32:
            raise CoordinateRangeError(f"bit depth {self.bit_depth} outside [1, 32]")
        if len(pts) and int(pts.max()) > (1 << self.bit_depth) - 1:
            raise CoordinateRangeError(
                f"coordinate {int(pts.max())} exceeds {(1 << self.bit_depth) - 1}"
            )
        if len(pts) > 1:
            d = np.diff(pts.astype(np.int64), axis=0)
            # first non-zero axis difference must be positive
            nz = d != 0
            first = np.argmax(nz, axis=1)
            lead = d[np.arange(len(d)), first]
            if not np.all(nz.any(axis=1)) or np.any(lead < 0):
                raise CoordinateRangeError("points must be unique and lexicographically sorted")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.bit_depth == other.bit_depth and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"PointCloud({len(self)} points, bit_depth={self.bit_depth})"


def check_step(s: int) -> int:
    s = int(s)
    if s < 1 or s & (s - 1):
        raise InvalidStepError(f"quantization step {s} is not a positive power of two")
    return s.bit_length() - 1


def dedup_sort(points, n: int) -> PointCloud:
    """Deduplicate and sort raw integer coordinates into a ``PointCloud``."""
    arr = np.asarray(points)
    if arr.size == 0:
        return PointCloud(np.zeros((0, 3), dtype=COORD_DTYPE), n)
    arr = arr.reshape(-1, 3)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise CoordinateRangeError("coordinates must be integers")
    arr = arr.astype(np.int64)
    hi = (1 << n) - 1
    if arr.min() < 0 or arr.max() > hi:
        raise CoordinateRangeError(f"coordinate outside [0, {hi}] for bit depth {n}")
    return PointCloud(unique_rows(arr).astype(COORD_DTYPE), n)


def quantize(pc: PointCloud, s: int) -> PointCloud:
    """Floor-divide coordinates by the power-of-two step ``s`` and dedup."""
    b = check_step(s)
    if b > pc.bit_depth:
        raise InvalidStepError(f"step {s} exceeds 2^{pc.bit_depth}")
    if b == 0:
        return pc
    depth = pc.bit_depth - b
    q = unique_rows(pc.points >> COORD_DTYPE(b))
    # a step of 2^n collapses everything into the single cell at depth 0;
    # PointCloud needs depth >= 1 so keep one bit of headroom
    return PointCloud(q, max(depth, 1))


def dequantize(pc: PointCloud, s: int, mode: str = "corner") -> np.ndarray:
    """Real-valued support points for each voxel, same order as ``pc``."""
    check_step(s)
    coords = np.asarray(pc.points if isinstance(pc, PointCloud) else pc, dtype=np.float64)
    if mode == "corner":
        return coords * s
    if mode == "center":
        return coords * s + s / 2.0
    raise ValueError(f"unknown dequantize mode {mode!r}")


def min_bit_depth(max_coord: int) -> int:
    """Smallest n with 2^n - 1 >= max_coord."""
    return max(1, int(max_coord).bit_length())
