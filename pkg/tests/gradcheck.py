"""Central finite-difference checks for autodiff graphs (test helper)."""

import numpy as np

from pivotc import autodiff as ad


def rel_error(analytic, numeric):
    """Norm-wise relative error ``max|a - n| / max|n|``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn, tensors, h=1e-6, max_entries=None, rng=None):
    """Relative error between backprop and central differences.

    The error is taken over all probed entries together, scaled by the
    largest gradient magnitude, so a tensor whose exact gradient is zero
    (say a bias that softmax cancels) is judged against the whole gradient
    rather than against its own round-off.
    ``fn`` builds a scalar Tensor from the current values of ``tensors``.
    With ``max_entries`` only a random subset of entries of each tensor is
    probed, which keeps checks of whole network blocks affordable.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    ad.backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in tensors]
    got, want = [], []
    rng = rng or np.random.default_rng(0)
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        with ad.no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(fn().data)
                flat[i] = old - h
                fm = float(fn().data)
                flat[i] = old
                num[j] = (fp - fm) / (2 * h)
        got.append(g.reshape(-1)[idx])
        want.append(num)
    return rel_error(np.concatenate(got), np.concatenate(want))
