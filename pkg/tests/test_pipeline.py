import numpy as np
import pytest

from pivotc.codec import PivotModel
from pivotc.config import CodecConfig
from pivotc.errors import ConfigError, DecodeError, EmptyInputError, ModelMismatchError
from pivotc.geometry import PointCloud
from pivotc.io import pack_container, unpack_container
from pivotc.metrics import psnr_d1
from pivotc.octree import decode_octree
from pivotc.pipeline import bits_per_point, decode, encode
from pivotc.trainer import synth_cloud

from conftest import small_stage, sphere_cloud


def _setup(c, m, f, seed=0):
    cfg = CodecConfig.from_triple(c, m, f, stage=small_stage(), seed=seed)
    return cfg, PivotModel(cfg).astype(np.float32)


@pytest.mark.parametrize("shape", ["sphere", "torus", "plane", "lidar_rings"])
@pytest.mark.parametrize("n", [7, 9])
def test_pure_octree_is_lossless(shape, n):
    pc = synth_cloud(shape, n, 300, seed=n)
    cfg = CodecConfig(n, n, n)
    data = encode(pc, None, cfg)
    dec = decode(data)
    assert dec.to_point_cloud() == pc
    assert psnr_d1(pc, dec.points, n) == np.inf
    assert bits_per_point(data, len(pc)) < 3 * n


@pytest.mark.parametrize("triple", [(5, 1, 2), (6, 2, 0), (6, 0, 2), (4, 2, 2), (7, 0, 1)])
def test_config_coverage_roundtrip(triple):
    pc = sphere_cloud(8, 1200, seed=1)
    cfg, model = _setup(*triple)
    data = encode(pc, model, cfg)
    dec = decode(data, model)
    c = dec.container
    assert (c.bit_depth, c.n1_prime, c.n1, c.n2) == (cfg.n, cfg.n1_prime, cfg.n1, cfg.n2)
    assert dec.missing == 0
    assert np.array_equal(dec.x_part.points, np.unique(pc.points >> (8 - cfg.n1), axis=0))
    for count in c.stage_counts:
        assert count > 0
    if cfg.point_stage:
        assert len(dec.points) == len(dec.x1) * small_stage().points_per_voxel
        s1 = cfg.s1
        centers = np.repeat(dec.x1 * s1 + s1 / 2, small_stage().points_per_voxel, axis=0)
        assert np.abs(dec.points - centers).max() <= small_stage().gamma * s1 / 2 + 1e-6
    else:
        assert len(dec.points) == (c.stage_counts[-1] if c.stage_counts else len(dec.x_part))
    assert np.isfinite(psnr_d1(pc, dec.points, 8))


def test_voxel_stage_without_point_stage_reproduces_counts():
    pc = sphere_cloud(8, 1500, seed=2)
    cfg, model = _setup(6, 2, 0)
    dec = decode(encode(pc, model, cfg), model)
    assert len(dec.x1) == len(pc)


def test_encoding_is_deterministic():
    pc = sphere_cloud(8, 1000, seed=3)
    cfg, model = _setup(5, 1, 2, seed=4)
    _, twin = _setup(5, 1, 2, seed=4)
    a = encode(pc, model, cfg)
    assert a == encode(pc, model, cfg) == encode(pc, twin, cfg)
    d1, d2 = decode(a, model), decode(a, twin)
    assert np.array_equal(d1.points, d2.points)


def test_feature_bytes_never_change_partition():
    pc = sphere_cloud(8, 1000, seed=5)
    cfg, model = _setup(5, 1, 2)
    data = encode(pc, model, cfg)
    c = unpack_container(data)
    ref = decode(data, model).x_part
    rng = np.random.default_rng(0)
    for _ in range(10):
        feat = bytearray(c.feat)
        for pos in rng.choice(len(feat), size=min(3, len(feat)), replace=False):
            feat[pos] ^= int(rng.integers(1, 256))
        bad = pack_container(type(c)(**{**c.__dict__, "feat": bytes(feat)}))
        try:
            got = decode(bad, model).x_part
        except DecodeError as exc:
            assert exc.stage == "features"
            got = decode_octree(unpack_container(bad).part, c.n1)
        assert got == ref


def test_model_mismatch_and_missing_model():
    pc = sphere_cloud(8, 800, seed=6)
    cfg, model = _setup(5, 1, 2)
    _, other = _setup(6, 1, 1)
    data = encode(pc, model, cfg)
    with pytest.raises(ModelMismatchError):
        decode(data, other)
    with pytest.raises(ModelMismatchError):
        decode(data, None)
    with pytest.raises(ModelMismatchError):
        encode(pc, other, cfg)


def test_decode_errors_name_the_stage():
    pc = sphere_cloud(8, 800, seed=7)
    cfg, model = _setup(5, 1, 2)
    data = encode(pc, model, cfg)
    with pytest.raises(DecodeError) as info:
        decode(b"XXXX" + data[4:], model)
    assert info.value.stage == "container"
    c = unpack_container(data)
    cut = pack_container(type(c)(**{**c.__dict__, "part": c.part[: len(c.part) // 2]}))
    with pytest.raises(DecodeError) as info:
        decode(cut, model)
    assert info.value.stage == "octree"
    cut = pack_container(type(c)(**{**c.__dict__, "feat": c.feat[:2]}))
    with pytest.raises(DecodeError) as info:
        decode(cut, model)
    assert info.value.stage == "features"


def test_encode_input_errors():
    cfg, model = _setup(5, 1, 2)
    with pytest.raises(EmptyInputError):
        encode(PointCloud(np.zeros((0, 3), dtype=np.int64), 8), model, cfg)
    with pytest.raises(ConfigError):
        encode(sphere_cloud(9, 100), model, cfg)
