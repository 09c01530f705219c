import csv

import numpy as np
import pytest
from scipy.spatial import cKDTree

from pivotc.codec import PivotModel, load_model
from pivotc.config import CodecConfig, LossConfig, TrainConfig
from pivotc.errors import ConfigError, GenerationError, TrainingDivergedError
from pivotc.metrics import psnr_d1, psnr_d2
from pivotc.pipeline import decode, encode
from pivotc.trainer import (
    SHAPES,
    augment,
    crop,
    evaluate,
    inference_copy,
    rate_point_sweep,
    synth_cloud,
    train,
    write_loss_log,
)

from conftest import small_stage


def _cfg(c=4, m=1, f=2, lam=0.5, seed=0):
    return CodecConfig.from_triple(c, m, f, stage=small_stage(), loss=LossConfig(lam=lam), seed=seed)


def _short(epochs=2, **kw):
    return TrainConfig(epochs=epochs, batch_size=1, steps_per_epoch=2, **kw)


@pytest.mark.parametrize("shape", SHAPES)
def test_synth_cloud_is_reproducible(shape):
    a = synth_cloud(shape, 8, 500, seed=11)
    assert a == synth_cloud(shape, 8, 500, seed=11)
    assert len(a) == 500 and a.bit_depth == 8
    assert synth_cloud(shape, 8, 500, seed=12) != a


def test_plane_is_flat_and_lidar_is_sparse():
    plane = synth_cloud("plane", 10, 1000, seed=0)
    assert len(np.unique(plane.points[:, 2])) == 1

    def mean_nn(pc):
        pts = pc.points.astype(float)
        return cKDTree(pts).query(pts, k=2)[0][:, 1].mean()

    assert mean_nn(synth_cloud("lidar_rings", 10, 1000)) > mean_nn(synth_cloud("sphere", 10, 1000))


def test_synth_cloud_errors():
    with pytest.raises(ConfigError):
        synth_cloud("sphere", 5, 10)
    with pytest.raises(ConfigError):
        synth_cloud("cube", 8, 10)
    with pytest.raises(GenerationError):
        synth_cloud("plane", 6, 10000)


def test_augment_and_crop_stay_on_grid():
    rng = np.random.default_rng(0)
    pc = synth_cloud("torus", 8, 800)
    aug = augment(pc, rng)
    assert len(aug) == len(pc) and aug.points.max() <= 255
    assert sorted(np.abs(aug.points - 127.5).sum(axis=1).tolist()) == pytest.approx(
        sorted(np.abs(pc.points - 127.5).sum(axis=1).tolist()))
    part = crop(pc, 100, rng)
    assert len(part) == 100
    assert set(map(tuple, part.points.tolist())) <= set(map(tuple, pc.points.tolist()))
    assert crop(pc, 5000, rng) is pc


def test_lambda_zero_chamfer_decreases():
    pc = synth_cloud("sphere", 7, 600, seed=0)
    model = PivotModel(_cfg(lam=0.0))
    res = train(model, TrainConfig(epochs=10, lr=8e-4, batch_size=1, steps_per_epoch=4), [pc])
    cd = np.array([np.mean([r["L_CD"] for r in res.rows if r["epoch"] == e]) for e in range(1, 11)])
    avg = np.convolve(cd, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(avg) < 0), avg


def test_seeded_training_is_reproducible(tmp_path):
    pc = synth_cloud("sphere", 7, 400, seed=1)
    logs = []
    for run in range(2):
        path = tmp_path / f"log{run}.csv"
        res = train(PivotModel(_cfg(seed=3)), _short(seed=5), [pc], log_path=path)
        logs.append(path.read_bytes())
        assert len(res.rows) == 4 and len(res.epoch_means) == 2
    assert logs[0] == logs[1]
    with open(tmp_path / "log0.csv") as f:
        header = next(csv.reader(f))
    assert header == ["epoch", "step", "L", "L_CD", "L_BCE", "L_R"]


def test_checkpoint_reload_reproduces_rate_and_distortion(tmp_path):
    pc = synth_cloud("sphere", 7, 400, seed=2)
    model = PivotModel(_cfg())
    ckpt = tmp_path / "m.pvtm"
    res = train(model, _short(), [pc], ckpt_path=ckpt)
    again = evaluate(load_model(ckpt), model.cfg, pc)
    for key in ("bpp", "d1_psnr", "d2_psnr"):
        assert again[key] == pytest.approx(res.final[key], rel=1e-4)
    assert again == evaluate(inference_copy(model), model.cfg, pc)


def test_evaluate_scores_the_rounded_reconstruction():
    pc = synth_cloud("sphere", 7, 400, seed=3)
    model = PivotModel(_cfg())
    rng = np.random.default_rng(0)
    for p in model.point_out.parameters():  # move points off the voxel centres
        p.data += rng.normal(scale=0.3, size=p.shape)
    model = inference_copy(model)
    dec = decode(encode(pc, model, model.cfg), model)
    assert not np.array_equal(dec.points, np.rint(dec.points))
    ev = evaluate(model, model.cfg, pc)
    assert ev["d1_psnr"] == psnr_d1(pc, dec.to_point_cloud(), model.cfg.n)
    assert ev["d2_psnr"] == psnr_d2(pc, dec.to_point_cloud(), model.cfg.n)


def test_divergence_saves_last_good_state(tmp_path):
    pc = synth_cloud("sphere", 7, 300, seed=3)
    model = PivotModel(_cfg())
    model.bottleneck.biases[0].data[:] = np.nan
    ckpt = tmp_path / "bad.pvtm"
    with pytest.raises(TrainingDivergedError):
        train(model, _short(), [pc], ckpt_path=ckpt)
    assert ckpt.exists()


def test_train_rejects_bad_inputs():
    model = PivotModel(_cfg())
    with pytest.raises(ConfigError):
        train(model, _short(), [])
    with pytest.raises(ConfigError):
        train(model, _short(), [synth_cloud("sphere", 8, 100)])


def test_write_loss_log_round_trips_floats(tmp_path):
    rows = [{"epoch": 1, "step": 0, "L": 0.1 + 0.2, "L_CD": 1 / 3, "L_BCE": 2.0, "L_R": 1e-17}]
    write_loss_log(tmp_path / "l.csv", rows)
    with open(tmp_path / "l.csv") as f:
        back = list(csv.DictReader(f))
    assert float(back[0]["L"]) == 0.1 + 0.2 and float(back[0]["L_CD"]) == 1 / 3


def test_sweep_with_octree_point_only():
    pc = synth_cloud("sphere", 8, 500)
    curve, pts = rate_point_sweep(CodecConfig(8, 8, 8), [(8, 0, 0)], _short(), pc)
    assert len(pts) == 1 and pts[0].d1_psnr == np.inf
    assert curve.rates == (pts[0].bpp,)


def test_sweep_validation():
    pc = synth_cloud("sphere", 8, 500)
    base = _cfg(5, 1, 2)
    with pytest.raises(ConfigError):
        rate_point_sweep(base, [(5, 1, 2), (5, 1, 1)], _short(), pc)
    with pytest.raises(ConfigError):
        rate_point_sweep(base, [], _short(), pc)
    with pytest.raises(ConfigError):
        rate_point_sweep(base, [(5, 1, 2)], _short(lambdas=(0.1, 0.2)), pc)
