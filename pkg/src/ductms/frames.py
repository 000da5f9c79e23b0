"""Multi-scale learnable sparsifying frames and soft-threshold shrinkage.

A frame bank is a chain of convolutions: scale 1 is a stride-1 conv of the
image, each deeper scale is a stride-2 conv of the previous scale's
coefficients (half resolution, more channels).  `synthesize` is the exact
adjoint of `analyze`, so with the orthonormal-DCT initialization a
single-scale bank with circular padding satisfies W^T W = I to machine
precision.
"""

import numpy as np
from scipy.fft import dct

from . import tensor as T
from .tensor import soft_threshold  # noqa: F401  (shrinkage op lives here too)

SCALE_KERNEL_SIZES = (5, 7, 9, 11)
SCALE_CHANNELS = (25, 49, 81, 121)


def dct2_basis(k):
    """Orthonormal 2-D DCT-II basis as (k*k, k, k); Gram matrix = identity."""
    mat = dct(np.eye(k), norm="ortho", axis=0)  # rows = 1-D basis functions
    filters = np.einsum("iu,jv->ijuv", mat, mat).reshape(k * k, k, k)
    return filters


class FrameBank:
    """Per-scale analysis kernels with stride-2 inter-scale coupling."""

    def __init__(self, n_scales=4, pad="zero", init="dct", seed=0,
                 in_channels=1, requires_grad=False):
        if not 1 <= n_scales <= len(SCALE_KERNEL_SIZES):
            raise ValueError(f"n_scales must be in 1..{len(SCALE_KERNEL_SIZES)}")
        if pad not in T.PAD_MODES:
            raise ValueError(f"pad must be one of {T.PAD_MODES}")
        self.n_scales = n_scales
        self.pad = pad
        self.strides = [1] + [2] * (n_scales - 1)
        self.kernels = []
        rng = np.random.default_rng(seed)
        c_in = in_channels
        for i in range(n_scales):
            k = SCALE_KERNEL_SIZES[i]
            c_out = SCALE_CHANNELS[i]
            if init == "dct":
                kern = _dct_kernel(c_out, c_in, k)
            elif init == "random":
                kern = rng.normal(scale=1.0 / (k * np.sqrt(c_in)),
                                  size=(c_out, c_in, k, k))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.kernels.append(T.Tensor(kern, requires_grad=requires_grad))
            c_in = c_out

    @property
    def channels(self):
        return SCALE_CHANNELS[: self.n_scales]

    def named_params(self, prefix="frames"):
        return {f"{prefix}.scale{i + 1}": k for i, k in enumerate(self.kernels)}


def _dct_kernel(c_out, c_in, k):
    """DCT-initialized kernel: scale 1 is the exact tight frame (W^T W = I);
    deeper scales cycle each basis filter over one input channel."""
    basis = dct2_basis(k) / k
    kern = np.zeros((c_out, c_in, k, k))
    for j in range(c_out):
        kern[j, j % c_in] = basis[j % (k * k)]
    return kern


def init_tight_frame(fb):
    """Reset a bank's kernels to the orthonormal-DCT tight-frame start."""
    c_in = fb.kernels[0].shape[1]
    for i in range(fb.n_scales):
        k = SCALE_KERNEL_SIZES[i]
        kern = _dct_kernel(SCALE_CHANNELS[i], c_in, k)
        fb.kernels[i] = T.Tensor(kern, requires_grad=fb.kernels[i].requires_grad)
        c_in = SCALE_CHANNELS[i]
    return fb


def analyze(x, fb):
    """Image tensor -> list of per-scale coefficient tensors (the pyramid)."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise T.ShapeError("analyze expects an NCHW tensor")
    down = 2 ** (fb.n_scales - 1)
    if x.shape[2] % down or x.shape[3] % down:
        raise T.ShapeError(
            f"spatial dims {x.shape[2:]} must be divisible by {down} "
            f"for {fb.n_scales} scales")
    pyramid = []
    feat = x
    for kern, stride in zip(fb.kernels, fb.strides):
        feat = T.conv2d(feat, kern, pad=fb.pad, stride=stride)
        pyramid.append(feat)
    return pyramid


def synthesize(pyramid, fb):
    """Exact adjoint of `analyze`: coarse-to-fine transpose accumulation."""
    if len(pyramid) != fb.n_scales:
        raise T.ShapeError(f"pyramid has {len(pyramid)} scales, bank {fb.n_scales}")
    for c, ch in zip(pyramid, fb.channels):
        if c.shape[1] != ch:
            raise T.ShapeError(f"coefficient channels {c.shape[1]} != bank {ch}")
    acc = pyramid[-1]
    for i in range(fb.n_scales - 1, 0, -1):
        up = T.conv2d_transpose(acc, fb.kernels[i], pad=fb.pad, stride=fb.strides[i],
                                out_hw=pyramid[i - 1].shape[2:])
        acc = T.add(pyramid[i - 1], up)
    # scale-1 transpose maps 25 channels back to the image
    n, _, h, w = pyramid[0].shape
    return T.conv2d_transpose(acc, fb.kernels[0], pad=fb.pad, stride=1, out_hw=(h, w))
