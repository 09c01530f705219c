"""Acceptance gate: the ten primary criteria at their stated tolerances.

Each test records a PASS/FAIL line; the session summary prints all of them
(see ``pytest_terminal_summary`` in conftest.py).
"""

import csv
import io
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from pivotc import autodiff as ad
from pivotc.autodiff import Tensor
from pivotc.cli import main
from pivotc.codec import LATENT_MIN, EntropyBottleneck, PivotModel, bottleneck_decode, bottleneck_encode
from pivotc.config import CodecConfig, LossConfig, TrainConfig
from pivotc.geometry import dedup_sort
from pivotc.metrics import RdCurve, bd_metrics, chamfer_augmented, psnr_d1
from pivotc.nn import zero_parameters
from pivotc.octree import decode_octree, encode_octree
from pivotc.pipeline import decode, encode
from pivotc.rangecoder import AdaptiveBinaryModel, RangeDecoder, RangeEncoder
from pivotc.sparse import SparseTensor, sparse_conv, strided_conv, upsample2_nn
from pivotc.trainer import SHAPES, evaluate, inference_copy, synth_cloud, train
from pivotc.transformer import EvtParams, evt_block, evt_cascade, self_attention

from conftest import small_stage
from gradcheck import check
from test_transformer import _cloud, _loop_attention, _random_params

RESULTS = {}


@contextmanager
def criterion(num, title):
    detail = {}
    try:
        yield detail
    except BaseException:
        RESULTS[num] = ("FAIL", title, detail)
        raise
    RESULTS[num] = ("PASS", title, detail)


def result_lines():
    lines = []
    for num in sorted(RESULTS):
        status, title, detail = RESULTS[num]
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        lines.append(f"criterion {num:2d} {status}: {title}" + (f" ({extra})" if extra else ""))
    return lines


def test_c01_octree_lossless_random_clouds():
    with criterion(1, "octree lossless on 1000 random clouds in < 60 s") as info:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        for _ in range(1000):
            n = int(rng.integers(4, 17))
            count = int(rng.integers(1, 513))
            pc = dedup_sort(rng.integers(0, 1 << n, size=(count, 3)), n)
            assert decode_octree(encode_octree(pc), n) == pc
        info["seconds"] = round(time.perf_counter() - t0, 2)
        assert info["seconds"] < 60


def test_c02_pure_octree_pipeline():
    with criterion(2, "[n,0,0] pipeline lossless with bpp < 3n on surface clouds >= 64 points") as info:
        over, worst, cases = [], 0.0, 0
        for shape in SHAPES:
            for n in (8, 10, 12, 16):
                for count in (64, 128, 256, 2000):
                    pc = synth_cloud(shape, n, count, seed=n + count)
                    data = encode(pc, None, CodecConfig(n, n, n))
                    dec = decode(data)
                    assert dec.to_point_cloud() == pc
                    assert np.array_equal(np.sort(dec.points, axis=0), np.sort(pc.points.astype(float), axis=0))
                    assert psnr_d1(pc, dec.points, n) == math.inf
                    ratio = 8 * len(data) / len(pc) / (3 * n)
                    worst = max(worst, ratio)
                    cases += 1
                    if not ratio < 1:
                        over.append(f"{shape}/{n}b/{count}p:{ratio:.3f}")
        info["cases"] = cases
        info["max bpp/3n"] = round(worst, 3)
        if over:
            info["over"] = " ".join(over)
        assert not over


def test_c03_range_coder_near_entropy():
    with criterion(3, "range coder within 2% + 16 B of the Shannon bound") as info:
        rng = np.random.default_rng(3)
        for p in (0.1, 0.5, 0.9):
            bits = (rng.random(10**6) < p).astype(np.int64)
            ctx = np.zeros(len(bits), np.int64)
            enc = RangeEncoder()
            enc.encode_bits(AdaptiveBinaryModel(1).counts, ctx, bits)
            data = enc.finish()
            assert np.array_equal(RangeDecoder(data).decode_bits(AdaptiveBinaryModel(1).counts, ctx), bits)
            bound = len(bits) * -(p * math.log2(p) + (1 - p) * math.log2(1 - p)) / 8
            info[f"p={p}"] = f"{len(data) / bound:.4f}x"
            assert len(data) <= 1.02 * bound + 16


def test_c04_bottleneck_rate_matches_model():
    with criterion(4, "bottleneck size within 5% + 64 B of the model rate; exact roundtrip") as info:
        rng = np.random.default_rng(4)
        bn = EntropyBottleneck(16)
        for prm in bn.parameters():
            prm.data = prm.data + rng.normal(scale=0.3, size=prm.shape)
        y = rng.laplace(scale=2.5, size=(1000, 16)) + rng.normal(size=16)
        q, data = bottleneck_encode(bn, y)
        assert q.size >= 10**4
        pmf = bn.pmf_table()
        ideal = -np.log2(pmf[np.arange(16)[None, :], q - LATENT_MIN]).sum() / 8
        info["ratio"] = f"{len(data) / ideal:.4f}"
        assert abs(len(data) - ideal) <= 0.05 * ideal + 64
        assert np.array_equal(bottleneck_decode(bn, data, len(q)), q)


def _primitive_checks(rng):
    def t(*shape, lo=-2.0, hi=2.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)

    def away(*shape):
        return Tensor(rng.uniform(0.2, 2.0, shape) * rng.choice([-1, 1], shape), requires_grad=True)

    a, b, pos = t(4, 3), t(4, 3, lo=0.5, hi=2.0), t(4, 3, lo=0.3, hi=3.0)
    kink = away(4, 3)
    w = rng.normal(size=(4, 3))
    m1, m2 = t(4, 3), t(3, 5)
    w45 = rng.normal(size=(4, 5))
    yield "neg", lambda: ad.tsum(ad.neg(a) * w), [a]
    for name in ("tanh", "sigmoid", "softplus", "exp", "square"):
        fn = getattr(ad, name)
        yield name, (lambda fn=fn: ad.tsum(fn(a) * w)), [a]
    for name in ("relu", "absolute"):
        fn = getattr(ad, name)
        yield name, (lambda fn=fn: ad.tsum(fn(kink) * w)), [kink]
    yield "maximum_const", lambda: ad.tsum(ad.maximum_const(kink, 0.1) * w), [kink]
    yield "log", lambda: ad.tsum(ad.log(pos) * w), [pos]
    yield "sqrt", lambda: ad.tsum(ad.sqrt(pos) * w), [pos]
    for name in ("add", "sub", "mul", "div"):
        fn = getattr(ad, name)
        bb = t(3, lo=0.5, hi=2.0)
        yield name, (lambda fn=fn, bb=bb: ad.tsum(fn(a, bb) * w)), [a, bb]
    yield "tsum", lambda: ad.tsum(ad.tsum(a, axis=1) * w[:, 0]), [a]
    yield "mean", lambda: ad.tsum(ad.mean(a, axis=0) * w[0]), [a]
    yield "tmax", lambda: ad.tsum(ad.tmax(a, axis=1)[0] * w[:, 1]), [a]
    yield "softmax", lambda: ad.tsum(ad.softmax(a, axis=1) * w), [a]
    yield "matmul", lambda: ad.tsum(ad.matmul(m1, m2) * w45), [m1, m2]
    yield "reshape", lambda: ad.tsum(ad.reshape(a, (-1,)) * w.reshape(-1)), [a]
    yield "transpose", lambda: ad.tsum(ad.transpose(a) * w.T), [a]
    w46 = rng.normal(size=(4, 6))
    yield "concat", lambda: ad.tsum(ad.concat([a, b], axis=1) * w46), [a, b]
    wg = rng.normal(size=(2, 3, 3))
    yield "gather", lambda: ad.tsum(ad.gather(a, np.array([[0, 3, 3], [1, 1, 2]])) * wg), [a]
    ws = rng.normal(size=(6, 3))
    yield "scatter_add", lambda: ad.tsum(ad.scatter_add(a, np.array([5, 0, 5, 2]), 6) * ws), [a]

    coords = np.unique(rng.integers(0, 6, size=(40, 3)), axis=0)
    x = Tensor(rng.normal(size=(len(coords), 2)), requires_grad=True)
    st = SparseTensor(coords, x, 3)
    wc = Tensor(rng.normal(size=(27, 2, 3)), requires_grad=True)
    pc_ = rng.normal(size=(len(coords), 3))
    yield "sparse_conv", lambda: ad.tsum(sparse_conv(st.with_feats(x), wc).feats * pc_), [x, wc]
    wsd = Tensor(rng.normal(size=(8, 2, 3)), requires_grad=True)
    nout = len(strided_conv(st, wsd).coords)
    pd = rng.normal(size=(nout, 3))
    yield "strided_conv", lambda: ad.tsum(strided_conv(st.with_feats(x), wsd).feats * pd), [x, wsd]
    wu = Tensor(rng.normal(size=(8, 2, 3)), requires_grad=True)
    pu = rng.normal(size=(8 * len(coords), 3))
    yield "upsample2_nn", lambda: ad.tsum(upsample2_nn(st.with_feats(x), wu).feats * pu), [x, wu]
    ta, tb = t(7, 3), rng.normal(size=(5, 3))
    yield "chamfer", lambda: chamfer_augmented(ta, tb), [ta]


def _block_checks(rng):
    cfg = CodecConfig.from_triple(3, 1, 2, stage=small_stage())
    model = PivotModel(cfg)
    for prm in model.parameters():
        prm.data = prm.data + rng.normal(scale=0.05, size=prm.shape)
    pc = synth_cloud("sphere", 6, 300, seed=3)
    probe = rng.normal(size=(len(model.point_analysis(pc)), small_stage().c_point))
    yield "point analysis", lambda: ad.tsum(model.point_analysis(pc).feats * probe), model.point_mlp.parameters()

    coords = np.unique(rng.integers(0, 8, size=(30, 3)), axis=0)
    feats = Tensor(rng.normal(size=(len(coords), small_stage().c_voxel)), requires_grad=True)
    t = SparseTensor(coords, feats, 3)
    stage = model.voxel_up[0]
    wl = rng.normal(size=8 * len(coords))
    yield ("classification head", lambda: ad.tsum(stage.spawn(t.with_feats(feats), 6)[1] * wl),
           [feats] + stage.up.parameters() + stage.classifier.parameters())

    ecoords, _ = _cloud(rng, 12, 4)
    p = _random_params(4, 4, k=5)
    x = Tensor(rng.normal(size=(len(ecoords), 4)), requires_grad=True)
    pe = rng.normal(size=(len(ecoords), 4))
    yield "EVT block", lambda: ad.tsum(evt_block(SparseTensor(ecoords, x, 3), p).feats * pe), [x] + p.parameters()

    bn = EntropyBottleneck(3)
    for prm in bn.parameters():
        prm.data = prm.data + rng.normal(scale=0.3, size=prm.shape)
    y = Tensor(rng.normal(scale=2.0, size=(7, 3)), requires_grad=True)
    yield "bottleneck density", lambda: bn.bits(y), [y] + bn.parameters()


def test_c05_gradient_suite():
    with criterion(5, "finite-difference gradients < 1e-4 for every op and block in < 5 min") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        worst, failures, count = 0.0, [], 0
        for name, fn, tensors in list(_primitive_checks(rng)) + list(_block_checks(rng)):
            assert all(tt.dtype == np.float64 for tt in tensors)
            err = check(fn, tensors, max_entries=16)
            count += 1
            worst = max(worst, err)
            if not err < 1e-4:
                failures.append((name, err))
        info["checks"] = count
        info["max rel err"] = f"{worst:.2e}"
        info["seconds"] = round(time.perf_counter() - t0, 1)
        assert not failures, failures
        assert info["seconds"] < 300


def test_c06_transformer_properties():
    with criterion(6, "attention sums to 1, zero block identity, translation and loop-oracle equivalence") as info:
        rng = np.random.default_rng(6)
        coords, feats = _cloud(rng, 40, 6)
        _, w = self_attention(coords, Tensor(feats), _random_params(8, 1), return_weights=True)
        info["weight sum err"] = f"{np.abs(w.data.sum(axis=1) - 1).max():.1e}"
        assert np.abs(w.data.sum(axis=1) - 1).max() <= 1e-6

        zp = EvtParams(8, rng)
        zero_parameters(zp)
        out = evt_block(SparseTensor(coords, Tensor(feats), 3), zp)
        assert np.array_equal(out.feats.data, feats)

        p = _random_params(8, 2)
        t1 = evt_cascade(SparseTensor(coords, Tensor(feats), 4), p)
        t2 = evt_cascade(SparseTensor(coords + np.array([13, -2, 7]), Tensor(feats), 4), p)
        info["translation err"] = f"{np.abs(t1.feats.data - t2.feats.data).max():.1e}"
        assert np.abs(t1.feats.data - t2.feats.data).max() <= 1e-10

        worst = 0.0
        for seed in range(5):
            r = np.random.default_rng(100 + seed)
            c20, f20 = _cloud(r, 20, 5)
            assert len(c20) == 20
            pp = _random_params(8, seed, k=6)
            got = self_attention(c20, Tensor(f20), pp).data
            worst = max(worst, float(np.abs(got - _loop_attention(c20, f20, pp)).max()))
        info["oracle err"] = f"{worst:.1e}"
        assert worst <= 1e-10


# Training schedule for the smoke test: batch 1, 16 steps per epoch (see README).
SMOKE = dict(epochs=50, lr=8e-4, batch_size=1, steps_per_epoch=16, seed=0)
SMOKE_LAMBDA = 0.1


@pytest.mark.slow
def test_c07_training_smoke():
    with criterion(7, "50-epoch training halves the RD loss and gains >= 3 dB D1") as info:
        t0 = time.perf_counter()
        pc = synth_cloud("sphere", 8, 2000, seed=0)
        cfg = CodecConfig.from_triple(5, 1, 2, loss=LossConfig(lam=SMOKE_LAMBDA))
        model = PivotModel(cfg)
        before = evaluate(inference_copy(model), cfg, pc)["d1_psnr"]
        res = train(model, TrainConfig(**SMOKE), [pc])
        ratio = res.epoch_means[-1] / res.epoch_means[0]
        gain = res.final["d1_psnr"] - before
        info["loss ratio"] = f"{ratio:.3f}"
        info["D1 gain dB"] = f"{gain:.2f}"
        info["minutes"] = round((time.perf_counter() - t0) / 60, 1)
        assert ratio <= 0.5
        assert gain >= 3.0
        assert info["minutes"] < 30


def test_c08_metric_oracles():
    with criterion(8, "Chamfer brute force, unit-offset D1 and -10% BD-Rate oracles") as info:
        rng = np.random.default_rng(8)
        for _ in range(50):
            a = rng.normal(size=(int(rng.integers(1, 51)), 3)) * 5
            b = rng.normal(size=(int(rng.integers(1, 51)), 3)) * 5
            d = ((a[:, None] - b[None]) ** 2).sum(-1)
            brute = max(d.min(1).mean(), d.min(0).mean())
            assert abs(chamfer_augmented(a, b) - brute) <= 1e-12
        ref = rng.integers(0, 1000, size=(10, 3))
        got = psnr_d1(ref, ref + np.array([0, 1, 0]), 10)
        assert abs(got - 10 * math.log10(3 * 1023**2)) <= 1e-6
        rates = np.array([0.12, 0.3, 0.75, 1.6])
        psnrs = 28 + 9 * np.log10(rates)
        bd, _ = bd_metrics(RdCurve(tuple(rates), tuple(psnrs)), RdCurve(tuple(0.9 * rates), tuple(psnrs)))
        info["bd-rate"] = f"{bd:.4f}%"
        assert abs(bd + 10) <= 0.1 * 10 / 100


@pytest.mark.slow
def test_c09_heterogeneity_sweep(tmp_path, capsys):
    with criterion(9, "sweep [7,0,1],[6,1,1],[5,2,1]: bpp falls as c falls; table and SVG emitted") as info:
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text("shape = sphere\npoints = 2000\nlambda = 0.5\n")
        code = main(["sweep", "--config", str(cfg), "--triples", "7,0,1;6,1,1;5,2,1", "--epochs", "10",
                     "--steps-per-epoch", "4", "--batch-size", "1", "--seed", "0",
                     "--output", str(tmp_path / "rd.csv"), "--svg", str(tmp_path / "rd.svg")])
        out = capsys.readouterr().out
        assert code == 0
        table = {r["triple"]: float(r["bpp"]) for r in csv.DictReader(io.StringIO(out))}
        info.update(table)
        assert table["[7,0,1]"] > table["[6,1,1]"] > table["[5,2,1]"]
        rows = list(csv.DictReader(open(tmp_path / "rd.csv")))
        RdCurve.from_points([(float(r["bpp"]), float(r["d1_psnr"])) for r in rows])
        assert (tmp_path / "rd.svg").read_text().count("<circle") == 3


def test_c10_determinism(tmp_path):
    with criterion(10, "byte-identical encodes and identical seeded loss logs"):
        pc = synth_cloud("sphere", 8, 1500, seed=10)
        cfg = CodecConfig.from_triple(5, 1, 2, stage=small_stage(), seed=1)
        streams = {encode(pc, PivotModel(cfg).astype(np.float32), cfg) for _ in range(3)}
        assert len(streams) == 1
        logs = []
        for run in range(2):
            path = tmp_path / f"log{run}.csv"
            train(PivotModel(cfg), TrainConfig(epochs=2, batch_size=2, steps_per_epoch=2, seed=7),
                  [pc, synth_cloud("torus", 8, 1500, seed=11)], log_path=path)
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]
