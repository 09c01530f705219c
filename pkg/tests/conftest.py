import numpy as np
import pytest

from pivotc import _pykernels
from pivotc.geometry import dedup_sort

try:
    from pivotc import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

KERNELS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])


@pytest.fixture(params=KERNELS, ids=lambda m: m.BACKEND)
def kernels(request):
    return request.param


def random_cloud(rng, n_bits, count):
    pts = rng.integers(0, 1 << n_bits, size=(count, 3))
    return dedup_sort(pts, n_bits)


def sphere_cloud(n_bits=8, count=2000, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    hi = (1 << n_bits) - 1
    return dedup_sort(np.rint((v * 0.45 + 0.5) * hi).astype(np.int64), n_bits)


# Narrow networks keep model-level tests fast.

def small_stage():
    from pivotc.config import StageConfig

    return StageConfig(c_point=8, c_voxel=8, c_latent=4, k_group=4, evt_k=4, points_per_voxel=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.result_lines():
        terminalreporter.write_line(line)
