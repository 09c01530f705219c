"""Compare the compiled and pure-Python range coder kernels.

    python3 benchmarks/bench_kernels.py [--bits 200000] [--points 20000]
"""

import argparse
import time

import numpy as np

from pivotc import _pykernels
from pivotc.geometry import dedup_sort
from pivotc.rangecoder import AdaptiveBinaryModel, FrequencyTable

try:
    from pivotc import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, repeat=3):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_bits(mod, bits):
    def run():
        enc = mod.RangeEncoder()
        enc.encode_bits(AdaptiveBinaryModel(1).counts, np.zeros(len(bits), np.int64), bits)
        data = enc.finish()
        dec = mod.RangeDecoder(data)
        back = dec.decode_bits(AdaptiveBinaryModel(1).counts, np.zeros(len(bits), np.int64))
        assert np.array_equal(back, bits)
        return data
    return _time(run)


def bench_symbols(mod, syms, table):
    cum = table.cum[None, :]
    rows = np.zeros(len(syms), np.int64)

    def run():
        enc = mod.RangeEncoder()
        enc.encode_symbols(cum, rows, syms)
        data = enc.finish()
        back = mod.RangeDecoder(data).decode_symbols(cum, rows)
        assert np.array_equal(back, syms)
        return data
    return _time(run)


def bench_octree(mod, pc):
    from pivotc import octree

    def run():
        saved = octree.RangeEncoder, octree.RangeDecoder
        octree.RangeEncoder, octree.RangeDecoder = mod.RangeEncoder, mod.RangeDecoder
        try:
            data = octree.encode_octree(pc)
            assert octree.decode_octree(data, pc.bit_depth) == pc
        finally:
            octree.RangeEncoder, octree.RangeDecoder = saved
        return data
    return _time(run, repeat=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--bits", type=int, default=200_000)
    ap.add_argument("--symbols", type=int, default=100_000)
    ap.add_argument("--points", type=int, default=20_000)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    bits = (rng.random(args.bits) < 0.2).astype(np.int64)
    probs = np.exp(-0.5 * (np.arange(128) - 64.0) ** 2 / 36.0)
    table = FrequencyTable.from_probabilities(probs / probs.sum())
    syms = np.clip(np.rint(rng.normal(64, 6, args.symbols)), 0, 127).astype(np.int64)
    v = rng.normal(size=(args.points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pc = dedup_sort(np.rint((v * 0.45 + 0.5) * 1023).astype(np.int64), 10)

    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    results = {}
    print(f"{'case':<28}{'backend':<10}{'seconds':>10}{'bytes':>10}")
    for case, fn, arg in (
        (f"binary x{args.bits}", bench_bits, (bits,)),
        (f"symbols x{args.symbols}", bench_symbols, (syms, table)),
        (f"octree {len(pc)} pts", bench_octree, (pc,)),
    ):
        for name, mod in backends:
            sec, data = fn(mod, *arg)
            results[(case, name)] = (sec, data)
            print(f"{case:<28}{name:<10}{sec:>10.4f}{len(data):>10}")
        if len(backends) == 2:
            (tp, dp), (tc, dc) = results[(case, "python")], results[(case, "cython")]
            same = "identical" if dp == dc else "DIFFERENT"
            print(f"{'':<28}{'speedup':<10}{tp / tc:>10.1f}x  streams {same}")
    if _ckernels is None:
        print("compiled extension not built; only the fallback was measured")


if __name__ == "__main__":
    main()
