"""Shared oracles for the test suite (finite differences, inner products)."""

import numpy as np

from ductms import tensor as T


def finite_difference(fn, tensors, h=1e-5, sample=None, seed=0):
    """Central finite-difference gradients of scalar fn w.r.t. each tensor.

    `fn` is re-evaluated from scratch for every probe, so it must be pure.
    With `sample`, only that many randomly chosen coordinates per tensor are
    probed; the rest are returned as NaN (callers compare probed ones only).
    """
    rng = np.random.default_rng(seed)
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        else:
            idx = np.arange(flat.size)
        g = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.shape))
    return grads


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return np.max(np.abs(a - b)) / denom


def check_grads(fn, tensors, tol=1e-5, h=1e-5, sample=None, seed=0):
    """Assert autodiff gradients of scalar fn match finite differences.

    `sample` limits the FD probe to a random coordinate subset per tensor,
    which keeps the oracle tractable for convolution-sized parameters.
    """
    loss = fn()
    grads = T.backward(loss)
    fd = finite_difference(fn, tensors, h=h, sample=sample, seed=seed)
    for t, ref in zip(tensors, fd):
        got = grads.get(t, np.zeros(t.shape))
        probed = ~np.isnan(ref)
        scale = max(np.max(np.abs(ref[probed])), np.max(np.abs(got)), 1e-300)
        err = np.max(np.abs(got[probed] - ref[probed])) / scale
        assert err <= tol, f"gradient mismatch {err:.3e} > {tol:.1e}"


def inner(a, b):
    return float(np.sum(np.asarray(a, dtype=np.float64)
                        * np.asarray(b, dtype=np.float64)))
