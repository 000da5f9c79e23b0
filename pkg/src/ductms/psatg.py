"""Prompt-guided scale-adaptive threshold generation for the shrinkage step.

The prompt is a 3-channel image (windowed input instance, metal mask, dose
map whose constant value is the reciprocal dose fraction).  A small conv
extractor turns it into a feature vector; four fully connected heads map
that vector to per-channel weight/bias pairs which modulate (i) the
concatenated local/regional/global branch features and (ii) the input of
the threshold head.  One parameter set is shared by all unfolding stages;
per-scale 1x1 adapters absorb the differing channel counts of the frame
pyramid.
"""

import numpy as np

from . import tensor as T
from .attention import AnchoredStripeAttention, WindowAttention
from .physics import DoseLevel, mu_to_hu

MASK_HU_THRESHOLD = 3000.0       # metal segmentation threshold on the input
PROMPT_WINDOW = (-1000.0, 1000.0)  # HU window normalizing the input channel


def metal_mask_from_image(img_mu, hu_threshold=MASK_HU_THRESHOLD):
    """Threshold segmentation of the (metal-corrupted) input image."""
    return mu_to_hu(np.asarray(img_mu)) >= hu_threshold


def build_prompt(x_img, mask, dose, window=PROMPT_WINDOW):
    """Stack (windowed input, metal mask, dose map) into a (1,3,H,W) tensor.

    The image channel is normalized to [0, 1] by the HU window; the dose
    channel is constant at 1/dose fraction (2, 4 or 8).
    """
    x_img = np.asarray(x_img, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != x_img.shape:
        raise T.ShapeError(f"mask shape {mask.shape} != image {x_img.shape}")
    if isinstance(dose, str):
        dose = DoseLevel(dose)
    hu = mu_to_hu(x_img)
    lo, hi = window
    xn = np.clip((hu - lo) / (hi - lo), 0.0, 1.0)
    d = np.full_like(x_img, dose.reciprocal)
    stacked = np.stack([xn, mask.astype(np.float64), d])[None]
    return T.Tensor(stacked)


def _conv_params(rng, c_out, c_in, k, scale=None, bias_fill=0.0):
    scale = scale if scale is not None else 1.0 / np.sqrt(c_in * k * k)
    w = T.Tensor(rng.normal(scale=scale, size=(c_out, c_in, k, k)), requires_grad=True)
    b = T.Tensor(np.full(c_out, bias_fill), requires_grad=True)
    return w, b


def _apply_conv(x, w, b, stride=1):
    out = T.conv2d(x, w, pad="zero", stride=stride)
    return T.add(out, T.reshape(b, (1, b.shape[0], 1, 1)))


def _fc_params(rng, n_out, n_in, w_scale, bias_fill):
    w = T.Tensor(rng.normal(scale=w_scale, size=(n_out, n_in)), requires_grad=True)
    b = T.Tensor(np.full(n_out, bias_fill), requires_grad=True)
    return w, b


class Psatg:
    """Shared-parameter threshold generator with per-scale channel adapters."""

    def __init__(self, scale_channels, core=16, window=4, stripe=4, n_anchors=2,
                 fsm_reduction=4, feat_dim=64, seed=0, prompt_enabled=True,
                 use_lieb=True, use_rieb=True, use_gieb=True,
                 threshold_bias=-6.0):
        self.scale_channels = tuple(scale_channels)
        self.core = core
        self.prompt_enabled = prompt_enabled
        self.use_lieb = use_lieb
        self.use_rieb = use_rieb
        self.use_gieb = use_gieb
        self.feat_dim = feat_dim
        rng = np.random.default_rng(seed)

        self.in_adapters = []
        self.out_adapters = []
        for c in self.scale_channels:
            self.in_adapters.append(_conv_params(rng, core, c, 1))
            self.out_adapters.append(_conv_params(rng, c, core, 1))

        self.shallow = _conv_params(rng, core, core, 3)
        self.lieb1 = _conv_params(rng, core, core, 3)
        self.lieb2 = _conv_params(rng, core, core, 3)
        self.rieb = WindowAttention(core, window=window, seed=seed + 1)
        self.gieb_h = AnchoredStripeAttention(core, "horizontal", n_anchors=n_anchors,
                                              stripe=stripe, seed=seed + 2)
        self.gieb_v = AnchoredStripeAttention(core, "vertical", n_anchors=n_anchors,
                                              stripe=stripe, seed=seed + 3)

        hidden = max(3 * core // fsm_reduction, 1)
        self.fsm_w1, self.fsm_b1 = _fc_params(rng, hidden, 3 * core, 0.1, 0.0)
        self.fsm_w2, self.fsm_b2 = _fc_params(rng, 3 * core, hidden, 0.1, 0.0)
        self.proj = _conv_params(rng, core, 3 * core, 1)

        self.head1 = _conv_params(rng, core, core, 3)
        self.head2 = _conv_params(rng, core, core, 3, bias_fill=0.0)
        self.threshold_bias = threshold_bias  # added before softplus; keeps eps small at init

        # prompt extractor: three stride-2 convs + GAP -> feat_dim vector
        self.ext1 = _conv_params(rng, 16, 3, 3)
        self.ext2 = _conv_params(rng, 32, 16, 3)
        self.ext3 = _conv_params(rng, feat_dim, 32, 3)
        # FC heads: near-identity modulation at init (k ~ 1, b ~ 0)
        self.fc_k1 = _fc_params(rng, 3 * core, feat_dim, 1e-2, 1.0)
        self.fc_b1 = _fc_params(rng, 3 * core, feat_dim, 1e-2, 0.0)
        self.fc_k2 = _fc_params(rng, core, feat_dim, 1e-2, 1.0)
        self.fc_b2 = _fc_params(rng, core, feat_dim, 1e-2, 0.0)

    # -- parameter registry ------------------------------------------------
    def named_params(self, prefix="psatg"):
        out = {}
        for i, (w, b) in enumerate(self.in_adapters):
            out[f"{prefix}.in_adapter{i + 1}.w"] = w
            out[f"{prefix}.in_adapter{i + 1}.b"] = b
        for i, (w, b) in enumerate(self.out_adapters):
            out[f"{prefix}.out_adapter{i + 1}.w"] = w
            out[f"{prefix}.out_adapter{i + 1}.b"] = b
        for name in ("shallow", "lieb1", "lieb2", "proj", "head1", "head2",
                     "ext1", "ext2", "ext3"):
            w, b = getattr(self, name)
            out[f"{prefix}.{name}.w"] = w
            out[f"{prefix}.{name}.b"] = b
        out.update(self.rieb.named_params(f"{prefix}.rieb"))
        out.update(self.gieb_h.named_params(f"{prefix}.gieb_h"))
        out.update(self.gieb_v.named_params(f"{prefix}.gieb_v"))
        out[f"{prefix}.fsm.w1"] = self.fsm_w1
        out[f"{prefix}.fsm.b1"] = self.fsm_b1
        out[f"{prefix}.fsm.w2"] = self.fsm_w2
        out[f"{prefix}.fsm.b2"] = self.fsm_b2
        if self.prompt_enabled:
            for name in ("fc_k1", "fc_b1", "fc_k2", "fc_b2"):
                w, b = getattr(self, name)
                out[f"{prefix}.{name}.w"] = w
                out[f"{prefix}.{name}.b"] = b
        return out

    def param_groups(self):
        """Name -> tensors, grouped for the no-dead-branch assertion."""
        groups = {
            "adapters": [t for pair in self.in_adapters + self.out_adapters for t in pair],
            "shallow": list(self.shallow),
            "lieb": list(self.lieb1) + list(self.lieb2),
            "rieb": list(self.rieb.named_params().values()),
            "gieb": (list(self.gieb_h.named_params().values())
                     + list(self.gieb_v.named_params().values())),
            "fsm": [self.fsm_w1, self.fsm_b1, self.fsm_w2, self.fsm_b2],
            "proj": list(self.proj),
            "head": list(self.head1) + list(self.head2),
        }
        if self.prompt_enabled:
            groups["ext"] = list(self.ext1) + list(self.ext2) + list(self.ext3)
            groups["fc"] = [t for n in ("fc_k1", "fc_b1", "fc_k2", "fc_b2")
                            for t in getattr(self, n)]
        return groups

    # -- prompt path ---------------------------------------------------------
    def extract_prompt_features(self, prompt):
        f = T.relu(_apply_conv(prompt, *self.ext1, stride=2))
        f = T.relu(_apply_conv(f, *self.ext2, stride=2))
        f = T.relu(_apply_conv(f, *self.ext3, stride=2))
        return T.global_average_pool(f)  # (1, feat_dim)

    def modulators(self, prompt):
        """(k1, b1, k2, b2) as (1,C,1,1) tensors; identity when prompt is off."""
        if not self.prompt_enabled or prompt is None:
            ones = T.Tensor(np.ones((1, 3 * self.core, 1, 1)))
            zeros = T.Tensor(np.zeros((1, 3 * self.core, 1, 1)))
            ones_c = T.Tensor(np.ones((1, self.core, 1, 1)))
            zeros_c = T.Tensor(np.zeros((1, self.core, 1, 1)))
            return ones, zeros, ones_c, zeros_c
        feat = self.extract_prompt_features(prompt)

        def head(pair, c):
            vec = T.fully_connected(feat, pair[0], pair[1])
            return T.reshape(vec, (1, c, 1, 1))

        return (head(self.fc_k1, 3 * self.core), head(self.fc_b1, 3 * self.core),
                head(self.fc_k2, self.core), head(self.fc_b2, self.core))

    # -- feature extraction ---------------------------------------------------
    def _fsm(self, x):
        """Squeeze-excitation channel attention over the 3*core channels."""
        g = T.global_average_pool(x)                       # (1, 3*core)
        h = T.relu(T.fully_connected(g, self.fsm_w1, self.fsm_b1))
        s = T.sigmoid(T.fully_connected(h, self.fsm_w2, self.fsm_b2))
        return T.mul(x, T.reshape(s, (1, x.shape[1], 1, 1)))

    def deep_extract(self, x, modulators):
        """Branch features -> modulated concat -> FSM -> core width."""
        k1, b1, _, _ = modulators
        lieb = (T.add(_apply_conv(T.relu(_apply_conv(x, *self.lieb1)), *self.lieb2), x)
                if self.use_lieb else x)
        rieb = self.rieb(x) if self.use_rieb else x
        gieb = self.gieb_v(self.gieb_h(x)) if self.use_gieb else x
        cat = T.concat_channels([lieb, rieb, gieb])
        cat = T.add(T.mul(cat, k1), b1)
        return _apply_conv(self._fsm(cat), *self.proj)

    def threshold_map(self, coeff, scale_index, modulators):
        """Nonnegative eps map matching one scale's coefficient tensor."""
        _, _, k2, b2 = modulators
        a = _apply_conv(coeff, *self.in_adapters[scale_index])
        xh = _apply_conv(a, *self.shallow)
        d = self.deep_extract(xh, modulators)
        h = T.add(T.mul(d, k2), b2)
        h = _apply_conv(T.relu(_apply_conv(h, *self.head1)), *self.head2)
        h = _apply_conv(h, *self.out_adapters[scale_index])
        return T.softplus(T.add(h, self.threshold_bias))

    def thresholds(self, pyramid, prompt):
        """One eps map per pyramid scale; the prompt is encoded once."""
        mods = self.modulators(prompt)
        return [self.threshold_map(c, i, mods) for i, c in enumerate(pyramid)]
