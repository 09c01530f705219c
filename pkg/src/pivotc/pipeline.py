"""Encoder and decoder orchestration over the octree, voxel and point stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .codec import PivotModel, bottleneck_decode, bottleneck_encode
from .config import CodecConfig
from .errors import (
    ConfigError,
    DecodeError,
    EmptyInputError,
    ModelMismatchError,
    PivotError,
)
from .geometry import PointCloud, dedup_sort, quantize
from .io import Container, flags_for, pack_container, unpack_container
from .octree import decode_octree, encode_octree
from .sparse import SparseTensor


def _check_model(model, n: int, n1: int, n2: int, n1_prime: int) -> None:
    if model is None:
        raise ModelMismatchError("this container needs a model but none was given")
    c = model.cfg
    if (c.n, c.n1, c.n2, c.n1_prime) != (n, n1, n2, n1_prime):
        raise ModelMismatchError(
            f"model interval n={c.n} n1'={c.n1_prime} n1={c.n1} n2={c.n2} does not match "
            f"stream n={n} n1'={n1_prime} n1={n1} n2={n2}"
        )


def encode(pc: PointCloud, model: PivotModel | None, cfg: CodecConfig) -> bytes:
    """Compress ``pc`` into a PVTN container."""
    if len(pc) == 0:
        raise EmptyInputError("cannot encode an empty point cloud")
    if pc.bit_depth != cfg.n:
        raise ConfigError(f"cloud bit depth {pc.bit_depth} != configured n={cfg.n}")
    if not cfg.learned:
        part = encode_octree(pc)
        c = Container(cfg.n, cfg.n, cfg.n, cfg.n, 0, len(pc), (), part, b"")
        return pack_container(c)
    _check_model(model, cfg.n, cfg.n1, cfg.n2, cfg.n1_prime)
    with ad.no_grad():
        x1 = model.point_analysis(pc)
        x2 = model.voxel_analysis(x1)
        x_part = PointCloud(x2.coords, cfg.n1)
        f = model.feature_analysis(x2)
        _, feat = bottleneck_encode(model.bottleneck, f.feats.data)
    counts = tuple(len(quantize(pc, 1 << (cfg.n - level))) for level in range(cfg.n1 + 1, cfg.n2 + 1))
    c = Container(
        cfg.n, cfg.n1_prime, cfg.n1, cfg.n2, flags_for(cfg.n, cfg.n1, cfg.n2), len(pc),
        counts, encode_octree(x_part), feat,
    )
    return pack_container(c)


@dataclass
class Decoded:
    container: Container
    x_part: PointCloud
    x1: np.ndarray  # finest voxel coordinates at level n2
    points: np.ndarray  # float64 reconstruction in input units
    missing: int = 0

    def to_point_cloud(self) -> PointCloud:
        """Round, clip to the grid and deduplicate the reconstruction."""
        n = self.container.bit_depth
        pts = np.clip(np.rint(self.points), 0, (1 << n) - 1).astype(np.int64)
        return dedup_sort(pts, n)


def _stage(name):
    def wrap(fn, *args):
        try:
            return fn(*args)
        except DecodeError:
            raise
        except PivotError as exc:
            raise DecodeError(name, exc) from exc
    return wrap


def decode(data: bytes, model: PivotModel | None = None) -> Decoded:
    """Reconstruct a cloud from container bytes; errors name the failing stage."""
    c = _stage("container")(unpack_container, data)
    if not c.voxel_stage and not c.point_stage:
        pc = _stage("octree")(decode_octree, c.part, c.bit_depth, c.num_points)
        return Decoded(c, pc, pc.points.astype(np.int64), pc.points.astype(np.float64))
    _check_model(model, c.bit_depth, c.n1, c.n2, c.n1_prime)
    cfg = model.cfg
    x_part = _stage("octree")(decode_octree, c.part, c.n1)
    lat_coords = quantize(x_part, 1 << (c.n1 - c.n1_prime)).points.astype(np.int64)
    q = _stage("features")(bottleneck_decode, model.bottleneck, c.feat, len(lat_coords))
    dtype = model.feature_up.weight.dtype
    with ad.no_grad():
        latents = SparseTensor(lat_coords, ad.Tensor(q.astype(dtype)), c.n1_prime)
        t, missing = model.feature_synthesis(latents, x_part.points.astype(np.int64))
        for stage, count in enumerate(c.stage_counts):
            t = model.voxel_synthesis_stage(stage, t, count)
        points = model.reconstruct(t).data.astype(np.float64)
    if cfg.point_stage is not c.point_stage:
        raise DecodeError("container", ModelMismatchError("stage flags disagree with the model"))
    return Decoded(c, x_part, t.coords, points, missing)


def bits_per_point(data: bytes, num_points: int) -> float:
    return 8.0 * len(data) / num_points
