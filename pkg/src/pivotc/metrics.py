"""Training losses and rate-distortion evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig
from .errors import MetricError
from .geometry import PointCloud
from .sparse import threads


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points.astype(np.float64)
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def nearest(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(squared distance, index) of the nearest ``dst`` point for each ``src`` point."""
    tree = cKDTree(dst)
    dist, idx = tree.query(src, k=1, workers=threads())
    return dist**2, idx


def chamfer_augmented(a, b):
    """max(mean_a min_b |a-b|^2, mean_b min_a |a-b|^2).

    Differentiable in whichever argument is a ``Tensor``; returns a float
    when neither is.
    """
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise MetricError("Chamfer distance of an empty point set")
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return max(float(nearest(pa, pb)[0].mean()), float(nearest(pb, pa)[0].mean()))
    ta = a if isinstance(a, Tensor) else Tensor(pa)
    tb = b if isinstance(b, Tensor) else Tensor(pb)
    _, ia = nearest(pa, pb)
    _, ib = nearest(pb, pa)
    d_ab = ad.mean(ad.tsum(ad.square(ta - ad.gather(tb, ia)), axis=1))
    d_ba = ad.mean(ad.tsum(ad.square(tb - ad.gather(ta, ib)), axis=1))
    return d_ab if d_ab.data >= d_ba.data else d_ba


def bce_occupancy(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free softplus form."""
    z = ad.as_tensor(logits)
    t = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    return ad.mean(ad.softplus(z) - z * t)


def rd_loss(recon, gt, logits_per_stage, targets_per_stage, rate_bits_per_point, cfg: LossConfig):
    """alpha * Chamfer + beta * mean stage BCE + lambda * rate; returns (L, parts)."""
    cd = chamfer_augmented(recon, gt)
    cd = cd if isinstance(cd, Tensor) else Tensor(cd)
    if logits_per_stage:
        bces = [bce_occupancy(z, t) for z, t in zip(logits_per_stage, targets_per_stage)]
        bce = bces[0]
        for extra in bces[1:]:
            bce = bce + extra
        bce = bce * (1.0 / len(bces))
    else:
        bce = Tensor(0.0)
    rate = ad.as_tensor(rate_bits_per_point)
    total = cd * cfg.alpha + bce * cfg.beta + rate * cfg.lam
    parts = {"L": float(total.data), "L_CD": float(cd.data), "L_BCE": float(bce.data),
             "L_R": float(rate.data)}
    return total, parts


# ------------------------------------------------------------------ PSNR

def estimate_normals(points: np.ndarray, k: int = 9) -> np.ndarray:
    """PCA normals over the ``k`` nearest neighbors (including the point).

    Signs are fixed so the first non-zero of (z, y, x) is positive.
    """
    pts = np.asarray(points, dtype=np.float64)
    kk = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=kk, workers=threads())
    idx = idx.reshape(len(pts), kk)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    eps = 1e-12
    sign = np.ones(len(normals))
    decided = np.zeros(len(normals), dtype=bool)
    for axis in (2, 1, 0):
        comp = normals[:, axis]
        now = ~decided & (np.abs(comp) > eps)
        sign[now] = np.sign(comp[now])
        decided |= now
    return normals * sign[:, None]


def _directional_mse(ref, test, ref_normals=None):
    d2_rt, i_rt = nearest(ref, test)
    d2_tr, i_tr = nearest(test, ref)
    if ref_normals is None:
        return max(d2_rt.mean(), d2_tr.mean())
    e_rt = ((test[i_rt] - ref) * ref_normals).sum(axis=1) ** 2
    e_tr = ((ref[i_tr] - test) * ref_normals[i_tr]).sum(axis=1) ** 2
    return max(e_rt.mean(), e_tr.mean())


def _psnr(mse: float, n: int) -> float:
    if mse <= 0:
        return math.inf
    peak = (1 << n) - 1
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def psnr_d1(ref, test, n: int) -> float:
    pr, pt = _as_points(ref), _as_points(test)
    if len(pr) == 0 or len(pt) == 0:
        raise MetricError("PSNR of an empty point set")
    return _psnr(float(_directional_mse(pr, pt)), n)


def psnr_d2(ref, test, n: int, normals: np.ndarray | None = None) -> float:
    pr, pt = _as_points(ref), _as_points(test)
    if len(pr) == 0 or len(pt) == 0:
        raise MetricError("PSNR of an empty point set")
    if normals is None:
        normals = estimate_normals(pr)
    return _psnr(float(_directional_mse(pr, pt, normals)), n)


def format_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


# ------------------------------------------------------------------ BD metrics

@dataclass(frozen=True)
class RdCurve:
    """Rate-distortion points sorted by strictly increasing positive rate."""

    rates: tuple
    psnrs: tuple

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=np.float64)
        if len(r) != len(self.psnrs) or len(r) == 0:
            raise MetricError("RD curve needs matching, non-empty rate and PSNR lists")
        if np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise MetricError("RD curve rates must be positive and strictly increasing")

    @classmethod
    def from_points(cls, points) -> "RdCurve":
        pts = sorted((float(r), float(p)) for r, p in points)
        return cls(tuple(r for r, _ in pts), tuple(p for _, p in pts))

    def finite(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(self.rates, dtype=np.float64)
        p = np.asarray(self.psnrs, dtype=np.float64)
        ok = np.isfinite(p)
        return r[ok], p[ok]


def _integral_diff(x1, y1, x2, y2, lo, hi, cubic: bool) -> float:
    if cubic:
        p1 = np.polyint(np.polyfit(x1, y1, 3))
        p2 = np.polyint(np.polyfit(x2, y2, 3))
        i1 = np.polyval(p1, hi) - np.polyval(p1, lo)
        i2 = np.polyval(p2, hi) - np.polyval(p2, lo)
    else:
        grid = np.linspace(lo, hi, 1001)
        o1, o2 = np.argsort(x1), np.argsort(x2)
        i1 = np.trapezoid(np.interp(grid, x1[o1], y1[o1]), grid)
        i2 = np.trapezoid(np.interp(grid, x2[o2], y2[o2]), grid)
    return float((i2 - i1) / (hi - lo))


def bd_metrics(anchor: RdCurve, test: RdCurve) -> tuple[float, float]:
    """(BD-Rate in %, BD-PSNR in dB) of ``test`` against ``anchor``.

    Cubic fits in the log10-rate domain with four or more finite points
    per curve, piecewise-linear interpolation otherwise.
    """
    ra, pa = anchor.finite()
    rt, pt = test.finite()
    if len(ra) < 2 or len(rt) < 2:
        raise MetricError("BD metrics need at least two finite points per curve")
    la, lt = np.log10(ra), np.log10(rt)
    cubic = len(ra) >= 4 and len(rt) >= 4
    lo, hi = max(la.min(), lt.min()), min(la.max(), lt.max())
    if hi <= lo:
        raise MetricError("RD curves have no overlapping rate range")
    bd_psnr = _integral_diff(la, pa, lt, pt, lo, hi, cubic)
    lo, hi = max(pa.min(), pt.min()), min(pa.max(), pt.max())
    if hi <= lo:
        raise MetricError("RD curves have no overlapping PSNR range")
    d_log = _integral_diff(pa, la, pt, lt, lo, hi, cubic)
    bd_rate = 100.0 * (10.0**d_log - 1.0)
    return bd_rate, bd_psnr
