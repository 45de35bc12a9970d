"""Central finite-difference verification of analytic gradients."""

import numpy as np

from .tensor import AutodiffError, Tape, Tensor


def grad_check(f, x, eps=1e-4, coords=None):
    """Max relative error between analytic and central-difference gradients.

    `f` maps one Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the max over
    probed coordinates is returned. `coords` optionally restricts probing to
    a subset of flat indices (default: all).
    """
    if eps <= 0:
        raise AutodiffError("grad_check: eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise AutodiffError("grad_check: f must return a scalar")
        analytic = tape.backward(y)[xt.node].data.ravel()

    def probe(arr):
        out = f(Tensor(arr)).data
        if not np.all(np.isfinite(out)):
            raise AutodiffError("grad_check: f non-finite at probe point")
        return float(out)

    flat_idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.ravel()
    for i in flat_idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = probe(x0)
        flat[i] = orig - eps
        fm = probe(x0)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
