"""Synthetic shapes, the rate-distortion training loop and rate-point sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .codec import PivotModel, save_model, stage_targets
from .config import CodecConfig, LossConfig, TrainConfig
from .errors import ConfigError, GenerationError, TrainingDivergedError
from .geometry import PointCloud, dedup_sort
from .metrics import RdCurve, psnr_d1, psnr_d2, rd_loss
from .pipeline import bits_per_point, decode, encode
from .sparse import SparseTensor, coord_keys, lookup, prune

log = logging.getLogger(__name__)

SHAPES = ("sphere", "torus", "plane", "lidar_rings")
LOG_FIELDS = ("epoch", "step", "L", "L_CD", "L_BCE", "L_R")


# ------------------------------------------------------------------ synthetic data

def _surface(shape: str, rng: np.random.Generator, m: int, center: float, r: float) -> np.ndarray:
    if shape == "sphere":
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return center + r * v
    if shape == "torus":
        big, small = 0.68 * r, 0.3 * r
        # rejection sampling keeps the density uniform in area
        u = rng.uniform(0, 2 * np.pi, 3 * m)
        w = rng.uniform(0, 2 * np.pi, 3 * m)
        keep = rng.uniform(0, 1, 3 * m) <= (big + small * np.cos(w)) / (big + small)
        u, w = u[keep][:m], w[keep][:m]
        ring = big + small * np.cos(w)
        return center + np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(w)], axis=1)
    if shape == "plane":
        xy = rng.uniform(center - r, center + r, size=(m, 2))
        return np.concatenate([xy, np.full((m, 1), center)], axis=1)
    if shape == "lidar_rings":
        # beams at fixed elevations, each swept on an even azimuth grid like a
        # spinning sensor, hitting an enclosing sphere of radius r; rings sit
        # further apart than the points along a ring
        rings = max(4, round(0.5 * math.sqrt(m)))
        elev = np.linspace(-0.35 * np.pi, 0.35 * np.pi, rings)
        which = np.arange(m) % rings
        slot = np.arange(m) // rings
        per_ring = -(-m // rings)
        phase = rng.uniform(0, 2 * np.pi, rings)
        theta = phase[which] + 2 * np.pi * (slot + rng.uniform(-0.1, 0.1, m)) / per_ring
        rho = r * np.cos(elev[which])
        return np.stack(
            [center + rho * np.cos(theta), center + rho * np.sin(theta), center + r * np.sin(elev[which])],
            axis=1,
        )
    raise ConfigError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")


def synth_cloud(shape: str, bits: int, target_points: int, seed: int = 0) -> PointCloud:
    """Surface-sampled, voxelized cloud with exactly ``target_points`` points."""
    if not 6 <= bits <= 18:
        raise ConfigError(f"synthetic bit depth must be in [6, 18], got {bits}")
    if target_points < 1:
        raise ConfigError("target_points must be positive")
    rng = np.random.default_rng(seed)
    hi = (1 << bits) - 1
    center, r = hi / 2.0, 0.45 * hi
    seen: dict = {}
    for _ in range(64):
        pts = np.clip(np.rint(_surface(shape, rng, target_points, center, r)), 0, hi).astype(np.int64)
        for key in coord_keys(pts).tolist():
            seen.setdefault(key, None)
        if len(seen) >= target_points:
            break
    if len(seen) < target_points:
        raise GenerationError(
            f"a {shape} at {bits} bits holds about {len(seen)} voxels, fewer than {target_points}"
        )
    keys = np.fromiter(seen, dtype=np.int64, count=len(seen))[:target_points]
    mask = (1 << 21) - 1
    coords = np.stack([keys >> 42, (keys >> 21) & mask, keys & mask], axis=1) - 2
    return dedup_sort(coords, bits)


def augment(pc: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Random axis permutation and reflections (grid preserving)."""
    pts = pc.points.astype(np.int64)[:, rng.permutation(3)]
    hi = (1 << pc.bit_depth) - 1
    flip = rng.integers(0, 2, 3).astype(bool)
    pts[:, flip] = hi - pts[:, flip]
    return dedup_sort(pts, pc.bit_depth)


def crop(pc: PointCloud, budget: int, rng: np.random.Generator) -> PointCloud:
    """Cube-shaped block of ``budget`` points around a random seed point."""
    if len(pc) <= budget:
        return pc
    pts = pc.points.astype(np.float64)
    seed = pts[rng.integers(len(pts))]
    _, idx = cKDTree(pts).query(seed, k=budget, p=np.inf)
    return dedup_sort(pc.points[np.sort(idx)], pc.bit_depth)


# ------------------------------------------------------------------ training

def train_forward(model: PivotModel, pc: PointCloud, rng: np.random.Generator,
                  loss_cfg: LossConfig | None = None):
    """Differentiable forward pass with teacher-forced pruning; returns (loss, parts)."""
    cfg = model.cfg
    loss_cfg = loss_cfg or cfg.loss
    targets = stage_targets(pc, cfg)
    x1 = model.point_analysis(pc)
    x2 = model.voxel_analysis(x1)
    f = model.feature_analysis(x2)
    noise = rng.uniform(-0.5, 0.5, size=f.feats.shape).astype(f.feats.dtype)
    y = f.feats + Tensor(noise)
    rate = model.bottleneck.bits(y) * (1.0 / len(pc))
    t, _ = model.feature_synthesis(SparseTensor(f.coords, y, f.level), targets[cfg.n1])
    logits_all, labels_all = [], []
    for stage, level in enumerate(range(cfg.n1 + 1, cfg.n2 + 1)):
        child, logits = model.voxel_up[stage].spawn(t, cfg.n)
        member = lookup(coord_keys(targets[level]), child.coords) >= 0
        logits_all.append(logits)
        labels_all.append(member)
        t = model.voxel_up[stage].refine_kept(prune(child, member))
    recon = model.reconstruct(t)
    return rd_loss(recon, pc, logits_all, labels_all, rate, loss_cfg)


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)  # one dict per optimizer step
    epoch_means: list = field(default_factory=list)
    final: dict | None = None  # evaluation of the float32 model on the first cloud


def write_loss_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])


def evaluate(model: PivotModel | None, cfg: CodecConfig, pc: PointCloud) -> dict:
    """Encode, decode and score one cloud on the rounded integer reconstruction."""
    data = encode(pc, model, cfg)
    rec = decode(data, model).to_point_cloud()
    return {
        "bytes": len(data),
        "bpp": bits_per_point(data, len(pc)),
        "d1_psnr": psnr_d1(pc, rec, cfg.n),
        "d2_psnr": psnr_d2(pc, rec, cfg.n),
    }


def inference_copy(model: PivotModel) -> PivotModel:
    """float32 twin of ``model``, identical to what its checkpoint reloads as."""
    twin = PivotModel(model.cfg)
    twin.load_state_dict(model.state_dict())
    return twin.astype(np.float32)


def train(model: PivotModel, tcfg: TrainConfig, clouds, log_path=None, ckpt_path=None,
          loss_cfg: LossConfig | None = None, progress=None) -> TrainResult:
    """Adam on the RD loss; one step averages ``batch_size`` augmented samples.

    Aborts with :class:`TrainingDivergedError` on a non-finite loss, after
    writing the last good parameters to ``ckpt_path`` when given.
    """
    clouds = list(clouds)
    if not clouds:
        raise ConfigError("training needs at least one cloud")
    for pc in clouds:
        if pc.bit_depth != model.cfg.n:
            raise ConfigError(f"training cloud has bit depth {pc.bit_depth}, model expects {model.cfg.n}")
    rng = np.random.default_rng(tcfg.seed)
    params = model.parameters()
    state = ad.AdamState(params)
    steps = tcfg.steps_per_epoch or max(1, math.ceil(len(clouds) / tcfg.batch_size))
    result = TrainResult()
    good = model.state_dict()

    def abort(msg):
        if ckpt_path is not None:
            model.load_state_dict(good)
            save_model(ckpt_path, model)
        raise TrainingDivergedError(msg)

    cursor, order = 0, rng.permutation(len(clouds))
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for step in range(steps):
            model.zero_grad()
            sums = dict.fromkeys(LOG_FIELDS[2:], 0.0)
            for _ in range(tcfg.batch_size):
                if cursor == len(order):
                    cursor, order = 0, rng.permutation(len(clouds))
                pc = clouds[order[cursor]]
                cursor += 1
                pc = crop(pc, tcfg.voxel_budget, rng)
                if tcfg.augment:
                    pc = augment(pc, rng)
                loss, parts = train_forward(model, pc, rng, loss_cfg)
                if not all(math.isfinite(v) for v in parts.values()):
                    abort(f"non-finite loss at epoch {epoch} step {step}: {parts}")
                ad.backward(loss * (1.0 / tcfg.batch_size))
                for k in sums:
                    sums[k] += parts[k] / tcfg.batch_size
            good = model.state_dict()
            try:
                ad.adam_step(params, state, tcfg.lr)
            except TrainingDivergedError as exc:
                abort(f"epoch {epoch} step {step}: {exc}")
            row = {"epoch": epoch, "step": step, **sums}
            result.rows.append(row)
            losses.append(sums["L"])
            if progress is not None:
                progress(row)
        result.epoch_means.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.6f", epoch, result.epoch_means[-1])
    if log_path is not None:
        write_loss_log(log_path, result.rows)
    if ckpt_path is not None:
        save_model(ckpt_path, model)
    result.final = evaluate(inference_copy(model), model.cfg, clouds[0])
    return result


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepPoint:
    triple: tuple
    lam: float
    bpp: float
    d1_psnr: float
    d2_psnr: float


def rate_point_sweep(base: CodecConfig, triples, tcfg: TrainConfig, cloud: PointCloud,
                     train_clouds=None, models=None, ckpt_dir=None) -> tuple[RdCurve, list]:
    """One model per triple (trained with equal budgets unless supplied), scored on ``cloud``."""
    triples = [tuple(int(v) for v in t) for t in triples]
    if not triples:
        raise ConfigError("empty triple list")
    ns = {sum(t) for t in triples}
    if len(ns) != 1:
        raise ConfigError(f"triples disagree on n: {sorted(ns)}")
    if cloud.bit_depth != ns.pop():
        raise ConfigError(f"cloud bit depth {cloud.bit_depth} does not match the triples")
    lams = list(tcfg.lambdas)
    if lams and len(lams) not in (1, len(triples)):
        raise ConfigError("lambda grid must have one value or one per triple")
    models = models or {}
    points = []
    for i, t in enumerate(triples):
        lam = lams[i if len(lams) > 1 else 0] if lams else base.loss.lam
        cfg = base.with_triple(*t)
        cfg = replace(cfg, loss=replace(cfg.loss, lam=lam))
        model = None
        if cfg.learned:
            model = models.get(t)
            if model is None:
                model = PivotModel(cfg)
                ckpt = None if ckpt_dir is None else f"{ckpt_dir}/model_{t[0]}_{t[1]}_{t[2]}.pvtm"
                train(model, tcfg, train_clouds or [cloud], ckpt_path=ckpt)
                model = inference_copy(model)
        ev = evaluate(model, cfg, cloud)
        points.append(SweepPoint(t, lam, ev["bpp"], ev["d1_psnr"], ev["d2_psnr"]))
        log.info("triple %s: bpp %.4f D1 %.3f dB", t, ev["bpp"], ev["d1_psnr"])
    points.sort(key=lambda p: p.bpp)
    curve = RdCurve.from_points([(p.bpp, p.d1_psnr) for p in points])
    return curve, points
