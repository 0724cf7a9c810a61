"""Shared finite-difference gradient oracle for the test suite.

The numeric side never touches the tape: it re-runs the forward closure with
perturbed leaf values and differences the scalar outputs.
"""

import numpy as np

from mdnx import autodiff as ad


def _scalar(x):
    return x.item() if isinstance(x, ad.Tensor) else float(x)


def finite_diff(fn, leaves, eps=1e-4, sample=None, rng=None):
    """Central-difference gradients of scalar fn() w.r.t. each leaf tensor.

    sample limits the number of coordinates checked per leaf (chosen with
    rng); the returned arrays carry NaN at unchecked coordinates.
    """
    grads = []
    for t in leaves:
        flat = t.data.reshape(-1)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        else:
            coords = range(flat.size)
        g = np.full(flat.size, np.nan)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            f_plus = _scalar(fn())
            flat[i] = old - eps
            f_minus = _scalar(fn())
            flat[i] = old
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def analytic_grads(fn, leaves):
    """Tape gradients of scalar fn() w.r.t. each leaf tensor."""
    for t in leaves:
        t.zero_grad()
    with ad.Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [t.grad.copy() for t in leaves]


def assert_grads_match(fn, leaves, rtol=1e-3, eps=1e-4, sample=None, rng=None):
    """Check analytic gradients against central differences.

    fn must build the scalar loss from `leaves` and be safe to call
    repeatedly (pure given the leaf values).
    """
    ana = analytic_grads(fn, leaves)
    num = finite_diff(fn, leaves, eps=eps, sample=sample, rng=rng)
    for a, n in zip(ana, num):
        mask = ~np.isnan(n)
        diff = np.abs(a[mask] - n[mask])
        scale = max(1.0, np.abs(n[mask]).max() if mask.any() else 0.0)
        assert diff.size == 0 or diff.max() / scale < rtol, (
            f"gradient mismatch: max abs diff {diff.max():.3e}, scale {scale:.3e}"
        )
