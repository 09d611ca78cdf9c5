"""Toy segmentation generator with two prediction heads, and the discriminator.

The trunk is 4 named groups of conv + domain-norm + leaky-relu blocks with
stride-2 downsampling between groups (total factor 8). A lower-level head
taps the output of group 3 and a higher-level head the output of group 4;
both are 1x1 classifiers upsampled to input resolution and softmaxed, so each
head emits a per-pixel class-probability map. `fuse` blends the two maps with
a convex weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (DEFAULT_DTYPE, LOG_EPS, Tensor, bilinear_upsample, clamp,
                       conv2d, leaky_relu, sigmoid, softmax_channels)
from .normalization import DomainNormLayer

GROUP_NAMES = ("layer1", "layer2", "layer3", "layer4")
TRUNK_SLOPE = 0.1
DISC_SLOPE = 0.2


class Conv2d:
    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, zero_init=False, dtype=None):
        dtype = DEFAULT_DTYPE if dtype is None else dtype
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            scale = np.sqrt(2.0 / (c_in * k * k))
            w = (rng.standard_normal((c_out, c_in, k, k)) * scale).astype(dtype)
        self.weight = Tensor(w, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class _TrunkBlock:
    def __init__(self, c_in, c_out, stride, norm_mode, rng, dtype):
        self.conv = Conv2d(c_in, c_out, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.norm = DomainNormLayer(c_out, mode=norm_mode, dtype=dtype)

    def forward(self, x, domain, training, update_stats):
        h = self.conv(x)
        h = self.norm.forward(h, domain, training, update_stats=update_stats)
        return leaky_relu(h, TRUNK_SLOPE)


@dataclass
class FusedPrediction:
    """Convex combination of the two head outputs; stays on the simplex."""

    probs: Tensor
    alpha: float


def fuse(f_low, f_high, alpha):
    """alpha * lower-level map + (1 - alpha) * higher-level map."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fuse: alpha must be in [0, 1], got {alpha}")
    if f_low.shape != f_high.shape:
        raise ValueError(f"fuse: shape mismatch {f_low.shape} vs {f_high.shape}")
    if alpha == 0.0:
        return FusedPrediction(probs=f_high, alpha=alpha)
    if alpha == 1.0:
        return FusedPrediction(probs=f_low, alpha=alpha)
    return FusedPrediction(probs=f_low * alpha + f_high * (1.0 - alpha), alpha=alpha)


class SegmentationNet:
    """Trunk of 4 groups (2 blocks each) plus lower/higher prediction heads."""

    DOWNSAMPLE = 8

    def __init__(self, num_classes=5, image_size=64, in_channels=3,
                 widths=(16, 32, 64, 64), blocks_per_group=2, norm_mode="seat",
                 rng=None, dtype=None):
        if image_size % self.DOWNSAMPLE != 0:
            raise ValueError(f"image size {image_size} not divisible by trunk downsampling {self.DOWNSAMPLE}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        dtype = DEFAULT_DTYPE if dtype is None else dtype
        self.num_classes = int(num_classes)
        self.image_size = int(image_size)
        self.norm_mode = norm_mode
        self.groups = []
        c_prev = in_channels
        for gi, width in enumerate(widths):
            blocks = []
            for bi in range(blocks_per_group):
                stride = 2 if (gi > 0 and bi == 0) else 1
                blocks.append(_TrunkBlock(c_prev, width, stride, norm_mode, rng, dtype))
                c_prev = width
            self.groups.append(blocks)
        self.lower_head = Conv2d(widths[2], num_classes, 1, rng=rng, dtype=dtype)
        self.higher_head = Conv2d(widths[3], num_classes, 1, rng=rng, dtype=dtype)

    @property
    def group_names(self):
        return GROUP_NAMES[:len(self.groups)]

    def forward(self, x, domain, training=True, update_stats=None):
        """Run the trunk and both heads; returns (f_low, f_high) probability maps."""
        if x.ndim != 3:
            raise ValueError(f"expected a CxHxW image, got shape {x.shape}")
        _, h, w = x.shape
        if h % self.DOWNSAMPLE or w % self.DOWNSAMPLE:
            raise ValueError(f"spatial size {(h, w)} not divisible by {self.DOWNSAMPLE}")
        feat = x
        tap_low = None
        for gi, blocks in enumerate(self.groups):
            for block in blocks:
                feat = block.forward(feat, domain, training, update_stats)
            if gi == 2:
                tap_low = feat
        f_low = softmax_channels(bilinear_upsample(self.lower_head(tap_low), (h, w)))
        f_high = softmax_channels(bilinear_upsample(self.higher_head(feat), (h, w)))
        return f_low, f_high

    def parameters(self):
        params = []
        for blocks in self.groups:
            for block in blocks:
                params += block.conv.parameters()
                params += block.norm.parameters()
        params += self.lower_head.parameters()
        params += self.higher_head.parameters()
        return params

    def norm_groups(self):
        return [[block.norm for block in blocks] for blocks in self.groups]

    def norm_layers(self):
        layers = {}
        for name, blocks in zip(self.group_names, self.groups):
            for bi, block in enumerate(blocks):
                layers[f"{name}.block{bi + 1}"] = block.norm
        return layers

    def state_items(self):
        items = []
        for name, blocks in zip(self.group_names, self.groups):
            for bi, block in enumerate(blocks):
                prefix = f"net.{name}.block{bi + 1}"
                items.append((f"{prefix}.conv.weight", block.conv.weight.data))
                items.append((f"{prefix}.conv.bias", block.conv.bias.data))
                items += block.norm.state_items(f"{prefix}.norm")
        for head_name, head in (("lower_head", self.lower_head), ("higher_head", self.higher_head)):
            items.append((f"net.{head_name}.weight", head.weight.data))
            items.append((f"net.{head_name}.bias", head.bias.data))
        return items


class Discriminator:
    """4 stride-2 convs with leaky-relu, then a 1-channel map of target probability."""

    def __init__(self, in_channels, widths=(16, 32, 32, 32), rng=None, dtype=None):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        dtype = DEFAULT_DTYPE if dtype is None else dtype
        self.in_channels = int(in_channels)
        self.convs = []
        c_prev = in_channels
        for width in widths:
            self.convs.append(Conv2d(c_prev, width, 4, stride=2, padding=1, rng=rng, dtype=dtype))
            c_prev = width
        # zero init: every location starts at probability 0.5
        self.head = Conv2d(c_prev, 1, 3, stride=1, padding=1, rng=rng, zero_init=True, dtype=dtype)

    def forward(self, p):
        """Map an NxHxW probability map (or FusedPrediction) to per-location
        probability-of-target, clamped inside (LOG_EPS, 1 - LOG_EPS)."""
        x = p.probs if isinstance(p, FusedPrediction) else p
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels}xHxW input, got shape {x.shape}")
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), DISC_SLOPE)
        return clamp(sigmoid(self.head(h)), LOG_EPS, 1.0 - LOG_EPS)

    def parameters(self):
        params = []
        for conv in self.convs:
            params += conv.parameters()
        params += self.head.parameters()
        return params

    def state_items(self):
        items = []
        for ci, conv in enumerate(self.convs):
            items.append((f"disc.conv{ci + 1}.weight", conv.weight.data))
            items.append((f"disc.conv{ci + 1}.bias", conv.bias.data))
        items.append(("disc.head.weight", self.head.weight.data))
        items.append(("disc.head.bias", self.head.bias.data))
        return items


def set_requires_grad(params, flag):
    for p in params:
        p.requires_grad = bool(flag)
