"""kNN self-attention over voxels with MLP projections and relative-position encoding."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import MLP, Module
from .sparse import SparseTensor, knn_voxels


class EvtParams(Module):
    """Weights of one transformer block (shared when the block is cascaded).

    The last layers of the positional and output MLPs start at zero so a
    fresh block is close to the identity and cascading does not inflate
    feature magnitudes.
    """

    def __init__(self, d: int, rng: np.random.Generator, k: int = 16, c: float = 1.0):
        self.d, self.k, self.c = d, k, c
        self.mlp_q = MLP([d, d, d], rng)
        self.mlp_k = MLP([d, d, d], rng)
        self.mlp_v = MLP([d, d, d], rng)
        self.mlp_p = MLP([3, d, d], rng, zero_last=True)
        self.mlp_out = MLP([d, 2 * d, d], rng, zero_last=True)


def self_attention(coords, feats: Tensor, params: EvtParams, neighbors=None, return_weights=False):
    """Updated features ``sum_i softmax_i(Q_A . K_Ai / (c sqrt d)) V_Ai``.

    Keys and values of each neighbor get the positional term
    ``MLP_P(P_A - P_Ai)``. ``coords`` need not be sorted.
    """
    coords = np.asarray(coords, dtype=np.int64)
    d = params.d
    if feats.ndim != 2 or feats.shape[1] != d:
        raise ShapeError(f"attention expects {d} channels, got features {feats.shape}")
    n = len(coords)
    idx = knn_voxels(coords, coords, params.k) if neighbors is None else neighbors
    kk = idx.shape[1]
    q = params.mlp_q(feats)
    kf = params.mlp_k(feats)
    vf = params.mlp_v(feats)
    rel = (coords[:, None, :] - coords[idx]).reshape(-1, 3).astype(feats.dtype)
    enc = ad.reshape(params.mlp_p(Tensor(rel)), (n, kk, d))
    keys = ad.gather(kf, idx) + enc
    vals = ad.gather(vf, idx) + enc
    scale = 1.0 / (params.c * math.sqrt(d))
    logits = ad.tsum(ad.reshape(q, (n, 1, d)) * keys, axis=2) * scale
    weights = ad.softmax(logits, axis=1)
    out = ad.tsum(ad.reshape(weights, (n, kk, 1)) * vals, axis=1)
    if return_weights:
        return out, weights
    return out


def evt_block(t: SparseTensor, params: EvtParams, neighbors=None) -> SparseTensor:
    """Residual self-attention followed by a residual two-layer MLP."""
    if neighbors is None:
        neighbors = knn_voxels(t.coords, t.coords, params.k)
    f = t.feats + self_attention(t.coords, t.feats, params, neighbors)
    f = f + params.mlp_out(f)
    return t.with_feats(f)


def evt_cascade(t: SparseTensor, params: EvtParams, depth: int = 3) -> SparseTensor:
    """Apply the same block ``depth`` times; neighbors are computed once."""
    neighbors = knn_voxels(t.coords, t.coords, params.k)
    for _ in range(depth):
        t = evt_block(t, params, neighbors)
    return t
