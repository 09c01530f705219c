import numpy as np
import pytest

from pivotc import autodiff as ad
from pivotc.autodiff import Tensor
from pivotc.errors import ShapeError
from pivotc.geometry import dedup_sort, lex_order
from pivotc.sparse import (
    OFFSETS_3,
    DownScale,
    ResBlock,
    SparseTensor,
    UpSample,
    coord_keys,
    from_coords,
    knn_bruteforce,
    knn_voxels,
    lookup,
    prune,
    prune_to,
    sparse_conv,
    strided_conv,
    upsample2_nn,
)

from gradcheck import check


def _tensor(rng, n_bits=4, count=40, c=3, level=None):
    coords = dedup_sort(rng.integers(0, 1 << n_bits, size=(count, 3)), n_bits).points.astype(np.int64)
    return SparseTensor(coords, Tensor(rng.normal(size=(len(coords), c))), level or n_bits)


def test_lookup_and_keys():
    coords = np.array([[0, 0, 1], [0, 2, 0], [3, 1, 1]])
    keys = coord_keys(coords)
    assert np.all(np.diff(keys) > 0)
    got = lookup(keys, np.array([[3, 1, 1], [1, 1, 1], [0, 0, 1], [-1, 0, 0]]))
    assert got.tolist() == [2, -1, 0, -1]


def test_sparse_tensor_requires_sorted_unique():
    with pytest.raises(ShapeError):
        SparseTensor(np.array([[1, 0, 0], [0, 0, 0]]), np.zeros((2, 1)), 1)
    with pytest.raises(ShapeError):
        SparseTensor(np.array([[0, 0, 0]]), np.zeros((2, 1)), 1)


def test_from_coords_permutes_features():
    coords = np.array([[2, 0, 0], [0, 1, 0], [1, 1, 1]])
    t = from_coords(coords, np.array([[2.0], [0.0], [1.0]]), 2)
    assert t.coords.tolist() == [[0, 1, 0], [1, 1, 1], [2, 0, 0]]
    assert t.feats.data[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_sparse_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    t = _tensor(rng, 3, 60, 3)
    w = rng.normal(size=(27, 3, 2))
    b = rng.normal(size=2)
    out = sparse_conv(t, Tensor(w), Tensor(b))
    index = {tuple(c): i for i, c in enumerate(t.coords.tolist())}
    expect = np.tile(b, (len(t), 1))
    for o, c in enumerate(t.coords.tolist()):
        for k, off in enumerate(OFFSETS_3.tolist()):
            src = index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
            if src is not None:
                expect[o] += t.feats.data[src] @ w[k]
    np.testing.assert_allclose(out.feats.data, expect, atol=1e-12)
    assert np.array_equal(out.coords, t.coords)


def test_strided_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    t = _tensor(rng, 4, 80, 2)
    w = rng.normal(size=(8, 2, 3))
    out = strided_conv(t, Tensor(w))
    assert out.level == t.level - 1
    parents = sorted({tuple(c) for c in (t.coords >> 1).tolist()})
    assert out.coords.tolist() == [list(p) for p in parents]
    expect = {p: np.zeros(3) for p in parents}
    for c, f in zip(t.coords.tolist(), t.feats.data):
        d = ((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)
        expect[(c[0] >> 1, c[1] >> 1, c[2] >> 1)] += f @ w[d]
    np.testing.assert_allclose(out.feats.data, np.array([expect[p] for p in parents]), atol=1e-12)


def test_upsample_spawns_all_children():
    rng = np.random.default_rng(2)
    t = _tensor(rng, 3, 10, 2)
    w = rng.normal(size=(8, 2, 4))
    out = upsample2_nn(t, Tensor(w))
    assert len(out) == 8 * len(t) and out.level == t.level + 1
    assert np.array_equal(out.coords[lex_order(out.coords)], out.coords)
    index = {tuple(c): i for i, c in enumerate(t.coords.tolist())}
    for c, f in zip(out.coords.tolist(), out.feats.data):
        d = ((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)
        parent = index[(c[0] >> 1, c[1] >> 1, c[2] >> 1)]
        np.testing.assert_allclose(f, t.feats.data[parent] @ w[d], atol=1e-12)


def test_prune_and_prune_to():
    rng = np.random.default_rng(3)
    t = _tensor(rng, 3, 30, 2)
    mask = np.arange(len(t)) % 2 == 0
    p = prune(t, mask)
    assert np.array_equal(p.coords, t.coords[mask])
    extra = np.array([[7, 7, 7]]) if not (t.coords == 7).all(axis=1).any() else np.array([[9, 9, 9]])
    target = np.concatenate([t.coords[:5], extra])
    target = target[lex_order(target)]
    q, missing = prune_to(t, target)
    assert missing == 1
    assert np.array_equal(q.coords, target)
    row = int(np.flatnonzero((target == extra[0]).all(axis=1))[0])
    assert np.all(q.feats.data[row] == 0)
    with pytest.raises(ShapeError):
        prune(t, mask[:-1])


@pytest.mark.parametrize("k", [1, 5, 16, 100])
def test_knn_matches_bruteforce_with_ties(k):
    rng = np.random.default_rng(k)
    # a dense grid patch produces many equal distances
    t = _tensor(rng, 3, 300, 1)
    q = rng.integers(-1, 9, size=(40, 3))
    np.testing.assert_array_equal(knn_voxels(t.coords, q, k), knn_bruteforce(t.coords, q, k))


def test_knn_is_permutation_invariant():
    rng = np.random.default_rng(7)
    coords = rng.integers(0, 6, size=(120, 3))
    coords = np.unique(coords, axis=0)
    perm = rng.permutation(len(coords))
    a = knn_voxels(coords, coords, 8)
    b = knn_voxels(coords[perm], coords[perm], 8)
    assert np.array_equal(coords[a][perm], coords[perm][b])


def test_kernel_matmul_gradients():
    rng = np.random.default_rng(8)
    t = _tensor(rng, 3, 25, 2)
    x = Tensor(t.feats.data.copy(), requires_grad=True)
    w = Tensor(rng.normal(size=(27, 2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.normal(size=(len(t), 3))
    fn = lambda: ad.tsum(sparse_conv(t.with_feats(x), w, b).feats * probe)  # noqa: E731
    assert check(fn, [x, w, b]) < 1e-4
    ws = Tensor(rng.normal(size=(8, 2, 3)), requires_grad=True)
    out_n = len(strided_conv(t, ws).coords)
    probe2 = rng.normal(size=(out_n, 3))
    fn2 = lambda: ad.tsum(strided_conv(t.with_feats(x), ws).feats * probe2)  # noqa: E731
    assert check(fn2, [x, ws]) < 1e-4


def test_layer_blocks_shapes_and_gradients():
    rng = np.random.default_rng(9)
    t = _tensor(rng, 4, 60, 4)
    down = DownScale(4, 3, rng)
    res = ResBlock(4, rng)
    up = UpSample(4, 2, rng)
    assert down(t).channels == 3 and down(t).level == 3
    assert res(t).channels == 4
    assert up(t).channels == 2 and len(up(t)) == 8 * len(t)
    probe = rng.normal(size=(len(t), 4))
    params = res.parameters()
    assert check(lambda: ad.tsum(res(t).feats * probe), params, max_entries=20) < 1e-4
