"""Sparse voxel tensors and the convolution-style operators over them.

A :class:`SparseTensor` pairs lexicographically sorted, unique integer voxel
coordinates with a feature matrix. Convolutions are expressed through
kernel maps: for each kernel offset, the (input row, output row) pairs it
connects. Within one offset every input and output row appears at most
once, which lets forward and backward use plain fancy-index accumulation.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .geometry import lex_order
from .nn import Module, param

_KEY_BITS = 21
_KEY_OFF = 2  # keeps coordinate-1 offsets non-negative inside the key

OFFSETS_3 = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64
)
CENTER_TAP = 13
CHILD_OFFSETS = np.array(
    [((d >> 2) & 1, (d >> 1) & 1, d & 1) for d in range(8)], dtype=np.int64
)


def threads() -> int:
    """Worker cap from ``PIVOTC_THREADS`` (default: all cores)."""
    val = os.environ.get("PIVOTC_THREADS")
    if val:
        try:
            return max(1, int(val))
        except ValueError:
            pass
    return -1


def coord_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _KEY_OFF
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


def lookup(coords_sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row index of each query coordinate, -1 where absent."""
    q = np.asarray(query, dtype=np.int64)
    valid = np.all(q >= -_KEY_OFF + 1, axis=1) if len(q) else np.zeros(0, bool)
    keys = coord_keys(np.where(valid[:, None], q, 0))
    pos = np.searchsorted(coords_sorted_keys, keys)
    pos = np.minimum(pos, max(len(coords_sorted_keys) - 1, 0))
    found = valid & (len(coords_sorted_keys) > 0)
    if len(coords_sorted_keys):
        found &= coords_sorted_keys[pos] == keys
    return np.where(found, pos, -1)


class SparseTensor:
    """Sorted unique voxel coordinates at ``level`` with per-voxel features."""

    def __init__(self, coords, feats, level: int, check: bool = True):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.ndim != 2 or feats.shape[0] != len(coords):
            raise ShapeError(f"{len(coords)} coordinates but features of shape {feats.shape}")
        self.coords = coords
        self.feats = feats
        self.level = int(level)
        self._keys = None
        self._maps = {}
        if check and __debug__:
            k = self.keys
            if len(k) > 1 and not np.all(k[1:] > k[:-1]):
                raise ShapeError("sparse tensor coordinates must be sorted and unique")

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = coord_keys(self.coords)
        return self._keys

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def __len__(self):
        return len(self.coords)

    def with_feats(self, feats: Tensor) -> "SparseTensor":
        out = SparseTensor(self.coords, feats, self.level, check=False)
        out._keys, out._maps = self._keys, self._maps
        return out

    def conv_map(self):
        """Kernel map of the 3x3x3 submanifold convolution (cached)."""
        if "conv3" not in self._maps:
            pairs = []
            for off in OFFSETS_3:
                idx = lookup(self.keys, self.coords + off)
                out_rows = np.flatnonzero(idx >= 0)
                pairs.append((idx[out_rows], out_rows))
            self._maps["conv3"] = pairs
        return self._maps["conv3"]

    def __repr__(self):
        return f"SparseTensor({len(self)} voxels, C={self.channels}, level={self.level})"


def from_coords(coords, feats, level: int) -> SparseTensor:
    """Build a tensor from unsorted coordinates, permuting features to match."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    order = lex_order(coords)
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    return SparseTensor(coords[order], ad.gather(feats, order), level)


def kernel_matmul(x: Tensor, weight: Tensor, kmap, n_out: int) -> Tensor:
    """``out[o] = sum_k sum_{(i,o) in map_k} x[i] @ weight[k]``."""
    x = ad.as_tensor(x)
    if weight.ndim != 3 or weight.shape[0] != len(kmap) or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel weight {weight.shape} does not fit {len(kmap)} taps and input {x.shape}"
        )
    out = np.zeros((n_out, weight.shape[2]), dtype=np.result_type(x.dtype, weight.dtype))
    for k, (i_rows, o_rows) in enumerate(kmap):
        if len(i_rows):
            out[o_rows] += x.data[i_rows] @ weight.data[k]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k, (i_rows, o_rows) in enumerate(kmap):
                if len(i_rows):
                    gx[i_rows] += g[o_rows] @ weight.data[k].T
            ad._acc(x, gx)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for k, (i_rows, o_rows) in enumerate(kmap):
                if len(i_rows):
                    gw[k] = x.data[i_rows].T @ g[o_rows]
            ad._acc(weight, gw)

    return ad._make(out, (x, weight), bw)


def sparse_conv(t: SparseTensor, weight: Tensor, bias: Tensor | None = None) -> SparseTensor:
    """3x3x3 stride-1 convolution; output coordinates equal input coordinates."""
    if weight.shape[:2] != (27, t.channels):
        raise ShapeError(f"conv weight {weight.shape} expects 27 taps x {t.channels} inputs")
    y = kernel_matmul(t.feats, weight, t.conv_map(), len(t))
    if bias is not None:
        y = y + bias
    return t.with_feats(y)


def parent_map(coords: np.ndarray):
    """Parents (sorted unique floor(c/2)) and per-child (parent row, digit)."""
    parents_all = coords >> 1
    digit = ((coords[:, 0] & 1) << 2) | ((coords[:, 1] & 1) << 1) | (coords[:, 2] & 1)
    keys = coord_keys(parents_all)
    uniq_keys, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return parents_all[first], inverse.reshape(-1), digit


def strided_conv(t: SparseTensor, weight: Tensor, bias: Tensor | None = None) -> SparseTensor:
    """Stride-2, 2x2x2 convolution onto the parent voxels."""
    if t.level < 1:
        raise ShapeError("cannot downscale below level 0")
    parents, prow, digit = parent_map(t.coords)
    kmap = []
    for d in range(8):
        rows = np.flatnonzero(digit == d)
        kmap.append((rows, prow[rows]))
    y = kernel_matmul(t.feats, weight, kmap, len(parents))
    if bias is not None:
        y = y + bias
    return SparseTensor(parents, y, t.level - 1, check=False)


def spawn_children(coords: np.ndarray):
    """All 8 children of each voxel, sorted; returns (children, parent row, digit)."""
    n = len(coords)
    child = (coords[:, None, :] << 1) + CHILD_OFFSETS[None, :, :]
    child = child.reshape(-1, 3)
    prow = np.repeat(np.arange(n), 8)
    digit = np.tile(np.arange(8), n)
    order = lex_order(child)
    return child[order], prow[order], digit[order]


def upsample2_nn(t: SparseTensor, weight: Tensor, bias: Tensor | None = None) -> SparseTensor:
    """Transposed convolution: every voxel spawns its 8 children.

    ``weight`` has shape (8, C_in, C_out): one block per child offset.
    """
    child, prow, digit = spawn_children(t.coords)
    kmap = []
    for d in range(8):
        rows = np.flatnonzero(digit == d)
        kmap.append((prow[rows], rows))
    y = kernel_matmul(t.feats, weight, kmap, len(child))
    if bias is not None:
        y = y + bias
    return SparseTensor(child, y, t.level + 1, check=False)


def prune(t: SparseTensor, keep) -> SparseTensor:
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (len(t),):
        raise ShapeError(f"mask of length {keep.shape} for {len(t)} voxels")
    rows = np.flatnonzero(keep)
    return SparseTensor(t.coords[rows], ad.gather(t.feats, rows), t.level, check=False)


def prune_to(t: SparseTensor, coords: np.ndarray):
    """Keep exactly ``coords`` (sorted); absent ones get zero features.

    Returns (tensor, number of coordinates that had no source voxel).
    """
    coords = np.asarray(coords, dtype=np.int64)
    idx = lookup(t.keys, coords)
    missing = int(np.sum(idx < 0))
    feats = ad.gather(t.feats, np.maximum(idx, 0))
    if missing:
        feats = feats * (idx >= 0).astype(feats.dtype)[:, None]
    return SparseTensor(coords, feats, t.level), missing


def knn_voxels(coords: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, N)`` nearest voxels for each query.

    Ordered by squared distance, ties broken by lexicographic coordinate
    (not storage order), so results are independent of row permutations.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    n = len(coords)
    kk = min(k, n)
    if n == 0 or len(queries) == 0:
        return np.zeros((len(queries), kk), dtype=np.int64)
    rank = np.empty(n, dtype=np.int64)
    rank[lex_order(coords)] = np.arange(n)
    tree = cKDTree(coords.astype(np.float64))
    probe = min(n, kk + 8)
    _, cand = tree.query(queries.astype(np.float64), k=probe, workers=threads())
    cand = cand.reshape(len(queries), probe)
    d2 = ((coords[cand] - queries[:, None, :]) ** 2).sum(axis=2)
    out = _rank_select(cand, d2, rank, n, kk)
    if probe < n:
        # the k-th distance may tie with points beyond the probe window
        kth = np.sort(d2, axis=1)[:, kk - 1]
        spill = np.flatnonzero(d2.max(axis=1) <= kth)
        for q in spill:
            ball = np.asarray(
                tree.query_ball_point(queries[q].astype(np.float64), np.sqrt(kth[q]) + 1e-6),
                dtype=np.int64,
            )
            bd2 = ((coords[ball] - queries[q]) ** 2).sum(axis=1)
            out[q] = _rank_select(ball[None], bd2[None], rank, n, kk)[0]
    return out


def _rank_select(cand, d2, rank, n, kk):
    key = d2 * n + rank[cand]
    order = np.argsort(key, axis=1, kind="stable")[:, :kk]
    return np.take_along_axis(cand, order, axis=1)


def knn_bruteforce(coords: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """O(N*Q) reference for :func:`knn_voxels`."""
    coords = np.asarray(coords, dtype=np.int64)
    rank = np.empty(len(coords), dtype=np.int64)
    rank[lex_order(coords)] = np.arange(len(coords))
    out = []
    for q in np.asarray(queries, dtype=np.int64):
        d2 = ((coords - q) ** 2).sum(axis=1)
        out.append(np.lexsort((rank, d2))[: min(k, len(coords))])
    return np.array(out, dtype=np.int64).reshape(len(queries), min(k, len(coords)))


# ------------------------------------------------------------------ layers

class Conv3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((27, c_in, c_out)) if zero else ad.kaiming_uniform(rng, 27 * c_in, (27, c_in, c_out))
        self.weight = param(w)
        self.bias = param(np.zeros(c_out))

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return sparse_conv(t, self.weight, self.bias)


class ResBlock(Module):
    """conv3 -> relu -> conv3, plus identity skip."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.conv1 = Conv3(c, c, rng)
        self.conv2 = Conv3(c, c, rng)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        h = self.conv1(t)
        h = self.conv2(h.with_feats(ad.relu(h.feats)))
        return t.with_feats(t.feats + h.feats)


class DownScale(Module):
    """Stride-2 convolution, relu, then two residual blocks (level - 1)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = param(ad.kaiming_uniform(rng, 8 * c_in, (8, c_in, c_out)))
        self.bias = param(np.zeros(c_out))
        self.res = [ResBlock(c_out, rng), ResBlock(c_out, rng)]

    def __call__(self, t: SparseTensor) -> SparseTensor:
        h = strided_conv(t, self.weight, self.bias)
        h = h.with_feats(ad.relu(h.feats))
        for block in self.res:
            h = block(h)
        return h


class UpSample(Module):
    """Transposed convolution spawning 8 children per voxel (level + 1)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.weight = param(ad.kaiming_uniform(rng, c_in, (8, c_in, c_out)))
        self.bias = param(np.zeros(c_out))

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return upsample2_nn(t, self.weight, self.bias)
