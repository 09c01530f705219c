"""Learned analysis/synthesis stages and the factorized entropy bottleneck."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .config import CodecConfig, codec_from_text, codec_to_text
from .errors import ConfigError, ModelError, ShapeError
from .geometry import PointCloud, lex_order, quantize
from .nn import MLP, Module, param, read_checkpoint, save_checkpoint
from .rangecoder import RangeDecoder, RangeEncoder, quantize_pmf
from .sparse import (
    DownScale,
    ResBlock,
    SparseTensor,
    UpSample,
    prune,
    prune_to,
    threads,
)
from .transformer import EvtParams, evt_cascade

log = logging.getLogger(__name__)

LATENT_MIN, LATENT_MAX = -64, 63
LIKELIHOOD_FLOOR = 1e-9


class EntropyBottleneck(Module):
    """Per-channel monotone density (filters 1-3-3-1) defining a CDF.

    ``logits_cdf(x)`` is non-decreasing in ``x`` because every mixing matrix
    passes through softplus and the tanh gates are bounded by the slope.
    """

    filters = (1, 3, 3, 1)

    def __init__(self, channels: int, init_scale: float = 10.0):
        self.channels = channels
        f = self.filters
        scale = init_scale ** (1.0 / (len(f) - 1))
        rng = np.random.default_rng(0)
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(f) - 1):
            init = math.log(math.expm1(1.0 / scale / f[i + 1]))
            self.matrices.append(param(np.full((channels, f[i + 1], f[i]), init)))
            self.biases.append(param(rng.uniform(-0.5, 0.5, (channels, f[i + 1]))))
            if i < len(f) - 2:
                self.factors.append(param(np.zeros((channels, f[i + 1]))))

    def logits_cdf(self, x: Tensor) -> Tensor:
        n, c = x.shape
        if c != self.channels:
            raise ShapeError(f"bottleneck has {self.channels} channels, input {x.shape}")
        h = ad.reshape(x, (n, c, 1))
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            fo, fi = m.shape[1], m.shape[2]
            w = ad.reshape(ad.softplus(m), (1, c, fo, fi))
            h = ad.tsum(ad.reshape(h, (n, c, 1, fi)) * w, axis=3) + b
            if i < len(self.factors):
                h = h + ad.tanh(self.factors[i]) * ad.tanh(h)
        return ad.reshape(h, (n, c))

    def likelihood(self, y: Tensor) -> Tensor:
        lower = self.logits_cdf(y - 0.5)
        upper = self.logits_cdf(y + 0.5)
        # evaluate in the tail where sigmoid differences keep precision
        sign = Tensor(-np.sign(lower.data + upper.data))
        lik = ad.absolute(ad.sigmoid(sign * upper) - ad.sigmoid(sign * lower))
        return ad.maximum_const(lik, LIKELIHOOD_FLOOR)

    def bits(self, y: Tensor) -> Tensor:
        return ad.tsum(ad.log(self.likelihood(y))) * (-1.0 / math.log(2.0))

    def pmf_table(self) -> np.ndarray:
        """(C, 128) probabilities of the integer support [-64, 63]."""
        with ad.no_grad():
            q = np.arange(LATENT_MIN, LATENT_MAX + 1, dtype=np.float64)
            # tables are built in float64 whatever the parameter dtype
            x = Tensor(np.repeat(q[:, None], self.channels, axis=1))
            edges = np.concatenate([q - 0.5, [q[-1] + 0.5]])
            edge_logits = self.logits_cdf(Tensor(np.repeat(edges[:, None], self.channels, axis=1))).data
            if not np.all(np.isfinite(edge_logits)) or np.any(np.diff(edge_logits, axis=0) < -1e-9):
                raise ModelError("entropy model CDF is not monotone")
            pmf = self.likelihood(x).data.T
        return np.asarray(pmf, dtype=np.float64)

    def cum_tables(self) -> np.ndarray:
        freqs = quantize_pmf(self.pmf_table())
        return np.concatenate([np.zeros((self.channels, 1), np.int64), np.cumsum(freqs, axis=1)], axis=1)


def quantize_latents(y: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(y), LATENT_MIN, LATENT_MAX).astype(np.int64)


def bottleneck_encode(bottleneck: EntropyBottleneck, latents: np.ndarray) -> tuple[np.ndarray, bytes]:
    """Round, clamp and range-code latents voxel by voxel, channel by channel."""
    q = quantize_latents(np.asarray(latents))
    n, c = q.shape
    if n == 0:
        return q, b""
    cum = bottleneck.cum_tables()
    enc = RangeEncoder()
    rows = np.tile(np.arange(c), n)
    enc.encode_symbols(cum, rows, (q - LATENT_MIN).reshape(-1))
    return q, enc.finish()


def bottleneck_decode(bottleneck: EntropyBottleneck, data: bytes, num_voxels: int) -> np.ndarray:
    c = bottleneck.channels
    if num_voxels == 0:
        return np.zeros((0, c), dtype=np.int64)
    cum = bottleneck.cum_tables()
    dec = RangeDecoder(data)
    syms = dec.decode_symbols(cum, np.tile(np.arange(c), num_voxels))
    return syms.reshape(num_voxels, c) + LATENT_MIN


class VoxelUpStage(Module):
    """One x2 context-aware upsampling stage (spawn, classify, prune, refine)."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.up = UpSample(c, c, rng)
        self.classifier = MLP([c + 4, 32, 1], rng)
        self.refine = [ResBlock(c, rng), ResBlock(c, rng)]

    def spawn(self, t: SparseTensor, n: int):
        """Candidate children and their occupancy logits."""
        child = self.up(t)
        child = child.with_feats(ad.relu(child.feats))
        level = child.level
        ctx = np.concatenate(
            [child.coords / float(1 << level), np.full((len(child), 1), level / n)], axis=1
        ).astype(child.feats.dtype)
        logits = self.classifier(ad.concat([child.feats, Tensor(ctx)], axis=1))
        return child, ad.reshape(logits, (len(child),))

    def refine_kept(self, kept: SparseTensor) -> SparseTensor:
        for block in self.refine:
            kept = block(kept)
        return kept


def top_n_mask(logits: np.ndarray, coords: np.ndarray, n_keep: int) -> np.ndarray:
    """Mask of the ``n_keep`` largest logits, ties to the lexicographically smaller voxel."""
    count = len(logits)
    mask = np.zeros(count, dtype=bool)
    if n_keep >= count:
        mask[:] = True
        return mask
    rank = np.empty(count, dtype=np.int64)
    rank[lex_order(coords)] = np.arange(count)
    order = np.lexsort((rank, -np.asarray(logits, dtype=np.float64)))
    mask[order[:n_keep]] = True
    return mask


class PivotModel(Module):
    """All learned stages for one :class:`CodecConfig` (one rate point)."""

    def __init__(self, cfg: CodecConfig):
        if not cfg.learned:
            raise ModelError("the pure-octree configuration has no learned stages")
        self._cfg = cfg
        st = cfg.stage
        rng = np.random.default_rng(cfg.seed)
        self.point_mlp = MLP([3, 32, st.c_point], rng, final_relu=True)
        n_down = cfg.n2 - cfg.n1
        self.voxel_down = [
            DownScale(st.c_point if i == 0 else st.c_voxel, st.c_voxel, rng) for i in range(n_down)
        ]
        c_x2 = st.c_voxel if n_down else st.c_point
        self.feature_down = DownScale(c_x2, st.c_latent, rng)
        self.bottleneck = EntropyBottleneck(st.c_latent)
        self.feature_up = UpSample(st.c_latent, st.c_voxel, rng)
        self.evt = EvtParams(st.c_voxel, rng, k=st.evt_k, c=st.evt_c)
        self.voxel_up = [VoxelUpStage(st.c_voxel, rng) for _ in range(n_down)]
        self.point_out = MLP([st.c_voxel, 64, 3 * st.points_per_voxel], rng, zero_last=True)

    @property
    def cfg(self) -> CodecConfig:
        return self._cfg

    # -------------------------------------------------------------- encoder side
    def point_analysis(self, pc: PointCloud) -> SparseTensor:
        cfg, st = self.cfg, self.cfg.stage
        s1 = cfg.s1
        x1 = quantize(pc, s1).points.astype(np.int64) if s1 > 1 else pc.points.astype(np.int64)
        centers = x1 * s1 + s1 / 2.0
        pts = pc.points.astype(np.float64)
        k = min(st.k_group, len(pts))
        dist, idx = cKDTree(pts).query(centers, k=k, distance_upper_bound=2.0 * s1, workers=threads())
        idx = idx.reshape(len(x1), k)
        dist = dist.reshape(len(x1), k)
        valid = np.isfinite(dist)
        # pad short groups with their nearest member; duplicates leave the max unchanged
        first = np.where(valid[:, 0], idx[:, 0], 0)
        idx = np.where(valid, idx, first[:, None])
        offsets = (pts[idx] - centers[:, None, :]) / s1
        # no member within the radius: fall back to the voxel's own residual (zero offset)
        offsets[~valid[:, 0]] = 0.0
        dtype = self.point_mlp.layers[0].weight.dtype
        emb = self.point_mlp(Tensor(offsets.reshape(-1, 3).astype(dtype)))
        emb = ad.reshape(emb, (len(x1), k, st.c_point))
        feats, _ = ad.tmax(emb, axis=1)
        return SparseTensor(x1, feats, cfg.n2)

    def voxel_analysis(self, x1: SparseTensor) -> SparseTensor:
        t = x1
        for block in self.voxel_down:
            t = block(t)
        return t

    def feature_analysis(self, x2: SparseTensor) -> SparseTensor:
        return self.feature_down(x2)

    # -------------------------------------------------------------- decoder side
    def feature_synthesis(self, latents: SparseTensor, x_part: np.ndarray):
        """Upsample latents onto the known X_part geometry, then EVT x depth."""
        up = self.feature_up(latents)
        up = up.with_feats(ad.relu(up.feats))
        x2, missing = prune_to(up, x_part)
        if missing:
            log.warning("%d X_part voxels had no parent latent; features zeroed", missing)
        return evt_cascade(x2, self.evt, self.cfg.stage.evt_depth), missing

    def voxel_synthesis_stage(self, stage: int, t: SparseTensor, n_keep: int):
        child, logits = self.voxel_up[stage].spawn(t, self.cfg.n)
        if n_keep > len(child):
            log.warning("stage count %d exceeds %d candidates; keeping all", n_keep, len(child))
        mask = top_n_mask(logits.data, child.coords, n_keep)
        return self.voxel_up[stage].refine_kept(prune(child, mask))

    def point_synthesis(self, x1: SparseTensor) -> Tensor:
        """K points per voxel: center + gamma * s1/2 * tanh(MLP(feature))."""
        cfg, st = self.cfg, self.cfg.stage
        s1 = cfg.s1
        raw = self.point_out(x1.feats)
        off = ad.tanh(raw) * (st.gamma * s1 / 2.0)
        off = ad.reshape(off, (len(x1) * st.points_per_voxel, 3))
        centers = np.repeat(x1.coords * s1 + s1 / 2.0, st.points_per_voxel, axis=0)
        return Tensor(centers.astype(off.dtype)) + off

    def reconstruct(self, x1: SparseTensor) -> Tensor:
        if self.cfg.point_stage:
            return self.point_synthesis(x1)
        return Tensor(x1.coords.astype(np.float64))


def stage_targets(pc: PointCloud, cfg: CodecConfig) -> dict:
    """Ground-truth voxel coordinates at every level n1..n2."""
    return {
        level: quantize(pc, 1 << (cfg.n - level)).points.astype(np.int64)
        for level in range(cfg.n1, cfg.n2 + 1)
    }


def save_model(path, model: PivotModel) -> None:
    """PVTM checkpoint whose metadata block is the model's codec config."""
    save_checkpoint(path, model, codec_to_text(model.cfg))


def load_model(path, dtype=np.float32) -> PivotModel:
    """Rebuild a model from a checkpoint; names and shapes must match its config."""
    meta, state = read_checkpoint(path)
    if not meta.strip():
        raise ModelError(f"{path}: checkpoint carries no codec configuration")
    try:
        cfg = codec_from_text(meta)
    except ConfigError as exc:
        raise ModelError(f"{path}: bad embedded configuration: {exc}") from None
    model = PivotModel(cfg)
    model.load_state_dict(state)
    return model.astype(dtype)
