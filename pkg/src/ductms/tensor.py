"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Everything is double precision and single-threaded per graph.  Each forward
op appends a sequence-numbered node to the implicit tape; `backward` replays
the reachable nodes in exact reverse recording order.  Convolutions use the
cross-correlation convention (no kernel flip), which fixes the meaning of
`conv2d_transpose` as the literal matrix transpose.
"""

import json
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(FloatingPointError):
    """A forward op produced (or consumed) NaN/Inf."""


_local = threading.local()


def _state():
    if not hasattr(_local, "seq"):
        _local.seq = 0
        _local.grad_enabled = True
        _local.flops = None
    return _local


def _next_seq():
    st = _state()
    st.seq += 1
    return st.seq


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / classical mode)."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextmanager
def count_flops():
    """Count multiply-accumulate work of matmuls inside the block.

    Used by complexity assertions (e.g. anchored attention is linear in
    token count); only matmul contributes, which is where attention cost
    lives.
    """
    st = _state()
    prev = st.flops
    st.flops = counter = [0]
    try:
        yield counter
    finally:
        st.flops = prev


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value in tensor op")


class Tensor:
    """Shaped float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_seq", "_live")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._seq = _next_seq()
        self._live = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_scalar()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_scalar():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjps):
    """Build the output tensor and record its backward closures."""
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._seq = _next_seq()
    if _state().grad_enabled and any(p._live for p in parents):
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out._live = True
    else:
        out._parents = ()
        out._vjps = ()
        out._live = False
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the parent shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Reverse-mode pass from a scalar loss.

    Returns a dict mapping every reachable requires_grad tensor to its
    gradient; the same arrays are also stored on `.grad`.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    # collect the reachable subgraph
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)

    # exact reverse recording order
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    keep = {}
    result = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            result[t] = g
            keep[id(t)] = t
        for parent, vjp in zip(t._parents, t._vjps):
            if not parent._live:
                continue
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for t, g in result.items():
        t.grad = g
    return result


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _node(data, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    ))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _node(data, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(-g, b.shape),
    ))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _node(data, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.shape),
        lambda g: _unbroadcast(g * a.data, b.shape),
    ))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _node(data, (a, b), (
        lambda g: _unbroadcast(g / b.data, a.shape),
        lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    ))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), (lambda g: 2.0 * a.data * g,))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _node(data, (a,), (lambda g: g * data,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _node(data, (a,), (lambda g: g * 0.5 / data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable logistic
    return _node(data, (a,), (lambda g: g * data * (1.0 - data),))


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _node(data, (a,), (lambda g: g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _node(data, (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes).copy(), (a,),
                 (lambda g: np.transpose(g, inv),))


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    first = tensors[0].data.shape
    for t in tensors:
        if t.data.shape[0] != first[0] or t.data.shape[2:] != first[2:]:
            raise ShapeError("concat_channels needs matching N/H/W dims")
    data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi]

    return _node(data, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def narrow(a, axis, start, length):
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return out

    return _node(a.data[idx].copy(), (a,), (vjp,))


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.shape).copy()

    return _node(np.asarray(data), (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def global_average_pool(x):
    """NCHW -> NC mean over the spatial dims."""
    if x.ndim != 4:
        raise ShapeError("global_average_pool expects NCHW")
    return tmean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# linear algebra

def _swap_last(arr):
    return np.swapaxes(arr, -1, -2)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    st = _state()
    if st.flops is not None:
        batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
        st.flops[0] += batch * data.shape[-2] * data.shape[-1] * a.shape[-1]
    return _node(data, (a, b), (
        lambda g: _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape),
        lambda g: _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape),
    ))


def fully_connected(x, w, b=None):
    """x[..., in] @ w[out, in]^T (+ b[out])."""
    out = matmul(x, transpose(w, (1, 0)))
    return out if b is None else add(out, b)


def softmax(x, axis):
    """Max-stabilized softmax along `axis`; sums to one on that axis."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shift = sub(x, x.data.max(axis=axis, keepdims=True))  # constant shift
    e = exp(shift)
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x, gain=None, bias=None, axis=1, eps=1e-6):
    """Normalize to zero mean / unit variance along `axis`, then affine."""
    mu = tmean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = tmean(square(xc), axis=axis, keepdims=True)
    out = div(xc, sqrt(add(var, eps)))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolution family (NCHW, odd kernels, same padding, stride 1 or 2)

PAD_MODES = ("zero", "circular")


def _check_conv_args(kh, kw, pad, stride):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel dims must be odd")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    if pad not in PAD_MODES:
        raise ShapeError(f"pad must be one of {PAD_MODES}")


def _pad_input(x, ph, pw, pad):
    if ph == 0 and pw == 0:
        return x
    if pad == "circular" and (ph >= x.shape[2] or pw >= x.shape[3]):
        raise ShapeError("circular padding requires kernel radius < spatial dims")
    mode = "constant" if pad == "zero" else "wrap"
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)


def _unpad_adjoint(gxp, ph, pw, pad, h, w):
    """Adjoint of `_pad_input`: crop, folding wrapped margins back for circular."""
    if ph == 0 and pw == 0:
        return gxp
    if pad == "zero":
        return gxp[:, :, ph:ph + h, pw:pw + w]
    # fold one axis at a time over the full extent of the other, so the
    # doubly-wrapped corner regions are accounted for
    g = gxp
    if pw:
        core = g[:, :, :, pw:pw + w].copy()
        core[:, :, :, -pw:] += g[:, :, :, :pw]
        core[:, :, :, :pw] += g[:, :, :, pw + w:]
        g = core
    if ph:
        core = g[:, :, ph:ph + h, :].copy()
        core[:, :, -ph:, :] += g[:, :, :ph, :]
        core[:, :, :ph, :] += g[:, :, ph + h:, :]
        g = core
    return g


def _conv_forward_raw(x, k, pad, stride):
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad_input(x, ph, pw, pad)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # N,C,H',W',kh,kw
    ho, wo = view.shape[2], view.shape[3]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ k.reshape(o, c * kh * kw).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols, (ho, wo)


def _conv_kernel_grad(x, g_out, kshape, pad, stride):
    """dL/dk for out = corr(x, k):  contract the window view with g_out."""
    o, c, kh, kw = kshape
    n = x.shape[0]
    ph, pw = kh // 2, kw // 2
    xp = _pad_input(x, ph, pw, pad)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    ho, wo = view.shape[2], view.shape[3]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    gmat = g_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    return (gmat.T @ cols).reshape(o, c, kh, kw)


def _conv_transpose_raw(y, k, pad, stride, out_hw):
    """Exact adjoint of `_conv_forward_raw` for the same (k, pad, stride)."""
    n, o, ho, wo = y.shape
    _, c, kh, kw = k.shape
    h, w = out_hw
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    ymat = y.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    for u in range(kh):
        for v in range(kw):
            contrib = ymat @ k[:, :, u, v]  # (N*ho*wo, C)
            contrib = contrib.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    return _unpad_adjoint(gxp, ph, pw, pad, h, w)


def _conv_out_hw(h, w, kh, kw, stride):
    ph, pw = kh // 2, kw // 2
    return (h + 2 * ph - kh) // stride + 1, (w + 2 * pw - kw) // stride + 1


def conv2d(x, k, pad="zero", stride=1):
    """Cross-correlation of NCHW input with an OCkhkw kernel, same padding."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OCkhkw kernel")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} kernel {k.shape}")
    _check_conv_args(k.shape[2], k.shape[3], pad, stride)
    data, _, _ = _conv_forward_raw(x.data, k.data, pad, stride)
    hw = x.shape[2:]
    return _node(data, (x, k), (
        lambda g: _conv_transpose_raw(g, k.data, pad, stride, hw),
        lambda g: _conv_kernel_grad(x.data, g, k.shape, pad, stride),
    ))


def conv2d_transpose(y, k, pad="zero", stride=1, out_hw=None):
    """Exact linear adjoint of conv2d with identical (k, pad, stride).

    `out_hw` disambiguates the input height/width for stride 2; defaults to
    stride * spatial dims of y.
    """
    y, k = as_tensor(y), as_tensor(k)
    if y.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d_transpose expects NCHW input and OCkhkw kernel")
    if y.shape[1] != k.shape[0]:
        raise ShapeError(f"channel mismatch: input {y.shape} kernel {k.shape}")
    _check_conv_args(k.shape[2], k.shape[3], pad, stride)
    if out_hw is None:
        out_hw = (stride * y.shape[2], stride * y.shape[3])
    expect = _conv_out_hw(out_hw[0], out_hw[1], k.shape[2], k.shape[3], stride)
    if expect != (y.shape[2], y.shape[3]):
        raise ShapeError(f"out_hw {out_hw} inconsistent with input {y.shape}")
    data = _conv_transpose_raw(y.data, k.data, pad, stride, out_hw)
    return _node(data, (y, k), (
        lambda g: _conv_forward_raw(g, k.data, pad, stride)[0],
        lambda g: _conv_kernel_grad(g, y.data, k.shape, pad, stride),
    ))


def depthwise_conv2d(x, k, pad="zero"):
    """Per-channel 2-D cross-correlation; kernel shaped (C, kh, kw)."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 3 or x.shape[1] != k.shape[0]:
        raise ShapeError("depthwise_conv2d expects NCHW and (C,kh,kw) kernel")
    c, kh, kw = k.shape
    _check_conv_args(kh, kw, pad, 1)
    ph, pw = kh // 2, kw // 2
    xp = _pad_input(x.data, ph, pw, pad)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    data = np.einsum("nchwuv,cuv->nchw", view, k.data, optimize=True)

    def vjp_x(g):
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + g.shape[2], v:v + g.shape[3]] += (
                    g * k.data[:, u, v][None, :, None, None])
        return _unpad_adjoint(gxp, ph, pw, pad, x.shape[2], x.shape[3])

    def vjp_k(g):
        return np.einsum("nchwuv,nchw->cuv", view, g, optimize=True)

    return _node(data, (x, k), (vjp_x, vjp_k))


# ---------------------------------------------------------------------------
# resampling

def _upsample_weights(n_out, n_in):
    """Index/weight pairs for 2x bilinear sampling (half-pixel centers)."""
    src = (np.arange(n_out) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, frac


def bilinear_upsample2(x):
    """Double both spatial dims of an NCHW tensor with bilinear weights."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample2 expects NCHW")
    n, c, h, w = x.shape
    r0, r1, fr = _upsample_weights(2 * h, h)
    c0, c1, fc = _upsample_weights(2 * w, w)
    fr = fr[:, None]
    fc = fc[None, :]

    def interp(arr):
        rows = arr[:, :, r0, :] * (1 - fr)[None, None] + arr[:, :, r1, :] * fr[None, None]
        return rows[:, :, :, c0] * (1 - fc)[None, None] + rows[:, :, :, c1] * fc[None, None]

    def vjp(g):
        # transpose of the separable interpolation: scatter cols, then rows
        tmp = np.zeros((n, c, 2 * h, w))
        np.add.at(tmp, (slice(None), slice(None), slice(None), c0), g * (1 - fc)[None, None])
        np.add.at(tmp, (slice(None), slice(None), slice(None), c1), g * fc[None, None])
        out = np.zeros((n, c, h, w))
        np.add.at(out, (slice(None), slice(None), r0, slice(None)), tmp * (1 - fr)[None, None])
        np.add.at(out, (slice(None), slice(None), r1, slice(None)), tmp * fr[None, None])
        return out

    return _node(interp(x.data), (x,), (vjp,))


def avg_pool2(x):
    """2x2 mean pooling of an NCHW tensor (even spatial dims)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even spatial dims")
    r = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return tmean(r, axis=(3, 5))


# ---------------------------------------------------------------------------
# shrinkage

def soft_threshold(c, eps):
    """sign(c) * max(|c| - eps, 0) with the dead-zone subgradient convention.

    `eps` broadcasts against `c` and must be nonnegative; d/dc = 0 on
    |c| <= eps, and d/deps = -sign(c) outside the dead zone.
    """
    c, eps = as_tensor(c), as_tensor(eps)
    if np.any(eps.data < 0):
        raise ValueError("soft_threshold requires eps >= 0")
    mag = np.abs(c.data) - eps.data
    alive = mag > 0.0
    sgn = np.sign(c.data)
    data = np.where(alive, sgn * mag, 0.0)
    return _node(data, (c, eps), (
        lambda g: _unbroadcast(g * alive, c.shape),
        lambda g: _unbroadcast(-g * sgn * alive, eps.shape),
    ))


# ---------------------------------------------------------------------------
# checkpoint I/O: one-line JSON manifest + raw little-endian f64 payloads

CKPT_FORMAT = "ductms-ckpt-v1"


def save_checkpoint(path, named):
    """Write named tensors: JSON manifest line, then payloads in manifest order."""
    entries = []
    blobs = []
    for name, t in named.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64le"})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = json.dumps({"format": CKPT_FORMAT, "tensors": entries},
                          separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(manifest.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode("utf-8"))
        if manifest.get("format") != CKPT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format in {path}")
        out = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"truncated checkpoint payload in {path}")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out
