"""pivotc: a trainable tree + voxel + point geometry codec for integer point clouds."""

from ._kernels import BACKEND
from .config import CodecConfig, LossConfig, StageConfig, TrainConfig, load_config
from .errors import *  # noqa: F401,F403
from .geometry import PointCloud, dedup_sort, dequantize, quantize
from .io import read_ply, write_ply
from .octree import decode_octree, encode_octree

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CodecConfig",
    "LossConfig",
    "PointCloud",
    "StageConfig",
    "TrainConfig",
    "decode_octree",
    "dedup_sort",
    "dequantize",
    "encode_octree",
    "load_config",
    "quantize",
    "read_ply",
    "write_ply",
]
