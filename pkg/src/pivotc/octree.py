"""Lossless breadth-first octree coding of integer point clouds.

Each occupied node emits an occupancy byte whose bit ``7 - i`` marks child
``i = (x_bit << 2) | (y_bit << 1) | z_bit``. Bits are coded MSB-first with
an adaptive binary model chosen by (bit index, bits already coded in this
byte, number of occupied children of the parent). The eighth bit is skipped
when the first seven are all zero, since an occupied node has a child.
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptStreamError, EmptyInputError, TruncatedStreamError
from .geometry import PointCloud, lex_order
from .rangecoder import AdaptiveBinaryModel, RangeDecoder, RangeEncoder

NUM_CONTEXTS = 255 * 8
# guards decoding of corrupted streams against runaway node growth
MAX_NODES = 1 << 26

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def morton_encode(coords: np.ndarray, n: int) -> np.ndarray:
    """Interleave coordinate bits MSB-first as (x, y, z) triples."""
    c = np.asarray(coords, dtype=np.uint64)
    code = np.zeros(len(c), dtype=np.uint64)
    for b in range(n - 1, -1, -1):
        sh = np.uint64(b)
        code = (code << np.uint64(3)) | (((c[:, 0] >> sh) & np.uint64(1)) << np.uint64(2))
        code |= ((c[:, 1] >> sh) & np.uint64(1)) << np.uint64(1)
        code |= (c[:, 2] >> sh) & np.uint64(1)
    return code


def morton_decode(codes: np.ndarray, n: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.zeros((len(codes), 3), dtype=np.uint64)
    for b in range(n):
        digit = codes >> np.uint64(3 * b)
        out[:, 0] |= ((digit >> np.uint64(2)) & np.uint64(1)) << np.uint64(b)
        out[:, 1] |= ((digit >> np.uint64(1)) & np.uint64(1)) << np.uint64(b)
        out[:, 2] |= (digit & np.uint64(1)) << np.uint64(b)
    return out


def occupancy_levels(pc: PointCloud) -> list[np.ndarray]:
    """Occupancy bytes of every tree level in breadth-first order."""
    n = pc.bit_depth
    codes = np.sort(morton_encode(pc.points, n))
    levels = []
    for level in range(n):
        prefix = np.unique(codes >> np.uint64(3 * (n - level - 1)))
        parent = prefix >> np.uint64(3)
        digit = (prefix & np.uint64(7)).astype(np.uint8)
        starts = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
        bits = (np.uint8(128) >> digit).astype(np.uint8)
        levels.append(np.bitwise_or.reduceat(bits, starts).astype(np.uint8))
    return levels


def _child_buckets(occ: np.ndarray) -> np.ndarray:
    pc = _POPCOUNT[occ]
    return np.repeat(pc, pc)


def encode_octree(pc: PointCloud) -> bytes:
    if len(pc) == 0:
        raise EmptyInputError("cannot octree-code an empty cloud")
    model = AdaptiveBinaryModel(NUM_CONTEXTS)
    enc = RangeEncoder()
    buckets = np.ones(1, dtype=np.uint8)
    for occ in occupancy_levels(pc):
        enc.encode_occupancy(model.counts, occ, buckets)
        buckets = _child_buckets(occ)
    return enc.finish()


def decode_octree(data: bytes, n: int, num_points: int | None = None) -> PointCloud:
    """Invert :func:`encode_octree`; ``num_points`` (if given) is verified."""
    model = AdaptiveBinaryModel(NUM_CONTEXTS)
    dec = RangeDecoder(data)
    nodes = np.zeros(1, dtype=np.uint64)
    buckets = np.ones(1, dtype=np.uint8)
    limit = MAX_NODES if num_points is None else num_points
    for _ in range(n):
        occ = dec.decode_occupancy(model.counts, buckets)
        if np.any(occ == 0):
            raise CorruptStreamError("decoded an empty occupancy byte")
        bits = np.unpackbits(occ[:, None], axis=1).astype(bool)
        children = (nodes[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)
        nodes = children[bits]
        if len(nodes) > limit:
            raise CorruptStreamError(f"node count {len(nodes)} exceeds expected {limit}")
        buckets = _child_buckets(occ)
    if num_points is not None and len(nodes) != num_points:
        raise CorruptStreamError(f"decoded {len(nodes)} points, expected {num_points}")
    if dec.pos != len(data):
        raise CorruptStreamError("trailing bytes after octree payload")
    coords = morton_decode(nodes, n)
    coords = coords[lex_order(coords)]
    return PointCloud(coords.astype(np.uint32), n)


__all__ = [
    "encode_octree",
    "decode_octree",
    "occupancy_levels",
    "morton_encode",
    "morton_decode",
    "NUM_CONTEXTS",
    "TruncatedStreamError",
]
