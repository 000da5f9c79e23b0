"""Window and anchored-stripe self-attention on NCHW feature maps.

Window attention runs full softmax attention inside non-overlapping w x w
tiles.  Anchored stripe attention covers whole rows/columns cheaply: each
stripe pools its tokens into a few anchors, attends anchors -> tokens to
build summaries, then tokens -> anchors to read them back, which keeps the
cost linear in token count for a fixed anchor budget.
"""

import numpy as np

from . import tensor as T


def _linear(tokens, w):
    """(B, L, C) x (C, C) projection."""
    return T.matmul(tokens, w)


def window_partition(x, w):
    """NCHW -> (N * nWin, w*w, C) token blocks."""
    n, c, h, wd = x.shape
    if h % w or wd % w:
        raise T.ShapeError(f"window {w} must divide spatial dims {(h, wd)}")
    t = T.reshape(x, (n, c, h // w, w, wd // w, w))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (n * (h // w) * (wd // w), w * w, c))


def window_merge(tokens, w, shape):
    n, c, h, wd = shape
    t = T.reshape(tokens, (n, h // w, wd // w, w, w, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (n, c, h, wd))


def stripe_partition(x, ss, horizontal):
    """NCHW -> (N * nStripes, ss * span, C); stripes span full rows or columns."""
    if not horizontal:
        x = T.transpose(x, (0, 1, 3, 2))
    n, c, h, wd = x.shape
    if h % ss:
        raise T.ShapeError(f"stripe size {ss} must divide dim {h}")
    t = T.reshape(x, (n, c, h // ss, ss, wd))
    t = T.transpose(t, (0, 2, 3, 4, 1))
    return T.reshape(t, (n * (h // ss), ss * wd, c))


def stripe_merge(tokens, ss, horizontal, shape):
    n, c, h, wd = shape
    if not horizontal:
        h, wd = wd, h
    t = T.reshape(tokens, (n, h // ss, ss, wd, c))
    t = T.transpose(t, (0, 4, 1, 2, 3))
    out = T.reshape(t, (n, c, h, wd))
    if not horizontal:
        out = T.transpose(out, (0, 1, 3, 2))
    return out


class WindowAttention:
    """Single-head self-attention inside non-overlapping windows (RIEB)."""

    def __init__(self, channels, window=4, seed=0):
        self.channels = channels
        self.window = window
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(channels)
        self.wq = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wk = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wv = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wo = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)

    def named_params(self, prefix="rieb"):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}

    def __call__(self, x):
        w = min(self.window, x.shape[2], x.shape[3])  # coarse scales shrink tiles
        tokens = window_partition(x, w)
        q = _linear(tokens, self.wq)
        k = _linear(tokens, self.wk)
        v = _linear(tokens, self.wv)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                       1.0 / np.sqrt(self.channels))
        att = T.softmax(scores, axis=-1)
        out = _linear(T.matmul(att, v), self.wo)
        return window_merge(out, w, x.shape)


class AnchoredStripeAttention:
    """Two-hop anchored attention over horizontal or vertical stripes."""

    def __init__(self, channels, orientation, n_anchors=2, stripe=4, seed=0):
        if orientation not in ("horizontal", "vertical"):
            raise ValueError("orientation must be horizontal or vertical")
        self.channels = channels
        self.orientation = orientation
        self.n_anchors = n_anchors
        self.stripe = stripe
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(channels)
        self.wq = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wk = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wv = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wa = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)
        self.wo = T.Tensor(rng.normal(scale=scale, size=(channels, channels)),
                           requires_grad=True)

    def named_params(self, prefix="gieb"):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wa": self.wa,
                f"{prefix}.wo": self.wo}

    def _anchors(self, tokens, n_anchors):
        """Mean-pool token groups to n_anchors summaries, then project."""
        b, length, c = tokens.shape
        if length % n_anchors:
            raise T.ShapeError(
                f"anchors {n_anchors} must divide token count {length}")
        grouped = T.reshape(tokens, (b, n_anchors, length // n_anchors, c))
        return _linear(T.tmean(grouped, axis=2), self.wa)

    def __call__(self, x):
        horizontal = self.orientation == "horizontal"
        ss = min(self.stripe, x.shape[2] if horizontal else x.shape[3])
        tokens = stripe_partition(x, ss, horizontal)
        q = _linear(tokens, self.wq)
        k = _linear(tokens, self.wk)
        v = _linear(tokens, self.wv)
        a = self._anchors(tokens)
        inv = 1.0 / np.sqrt(self.channels)
        # hop 1: anchors gather from all tokens
        gather = T.softmax(T.mul(T.matmul(a, T.transpose(k, (0, 2, 1))), inv), axis=-1)
        summary = T.matmul(gather, v)
        # hop 2: tokens read from anchors
        read = T.softmax(T.mul(T.matmul(q, T.transpose(a, (0, 2, 1))), inv), axis=-1)
        out = _linear(T.matmul(read, summary), self.wo)
        return stripe_merge(out, self.stripe, horizontal, x.shape)
