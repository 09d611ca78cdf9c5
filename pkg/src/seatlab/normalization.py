"""Batch normalization with per-domain statistics and affine parameters.

A ``DomainNormLayer`` in "sat" mode is a conventional batch-norm layer: one
running-statistics set and one affine (gamma, beta) pair shared by both input
domains. In "seat" mode the layer keeps a fully separate set per domain, so
source-domain traffic never moves the target set and vice versa. Both modes
present the same forward contract; callers tag every forward with the input's
domain.

The evaluation-time "layer switch" redirects target-domain forwards in chosen
layer groups through the source set. It is a view: only a boolean flag per
layer, never persisted to checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, _accum, register_op

DOMAINS = ("source", "target")


class DomainNormLayer:
    """Normalize over batch+spatial positions per channel, then scale/shift.

    With batch size 1 the batch statistics reduce to spatial statistics,
    which keeps them non-degenerate. Running statistics are updated only in
    training mode: running <- (1 - momentum) * running + momentum * batch.
    """

    def __init__(self, channels, mode="seat", eps=1e-5, momentum=0.1, dtype=None):
        if mode not in ("sat", "seat"):
            raise ValueError(f"unknown normalization mode {mode!r} (expected 'sat' or 'seat')")
        dtype = DEFAULT_DTYPE if dtype is None else dtype
        self.channels = int(channels)
        self.mode = mode
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.switch_to_source = False
        self.capture_prenorm = False
        self.last_prenorm = None

        def fresh_params():
            return (Tensor(np.ones(self.channels, dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(self.channels, dtype=dtype), requires_grad=True),
                    np.zeros(self.channels, dtype=dtype),
                    np.ones(self.channels, dtype=dtype))

        g, b, rm, rv = fresh_params()
        if mode == "sat":
            # both domains alias one shared set: updating one updates the other
            self.gamma = {"source": g, "target": g}
            self.beta = {"source": b, "target": b}
            self.running_mean = {"source": rm, "target": rm}
            self.running_var = {"source": rv, "target": rv}
        else:
            gt, bt, rmt, rvt = fresh_params()
            self.gamma = {"source": g, "target": gt}
            self.beta = {"source": b, "target": bt}
            self.running_mean = {"source": rm, "target": rmt}
            self.running_var = {"source": rv, "target": rvt}

    def forward(self, x, domain, training, update_stats=None):
        """Normalize `x` (CxHxW or BxCxHxW) using the tagged domain's set.

        Training mode uses batch statistics and (unless `update_stats` is
        False) updates the domain's running statistics. Eval mode uses the
        running statistics of the effective domain, which is "source" when
        the layer switch is active and the input is target-tagged.
        """
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain tag {domain!r}")
        if x.ndim == 3:
            caxis, axes = 0, (1, 2)
            bshape = (self.channels, 1, 1)
        elif x.ndim == 4:
            caxis, axes = 1, (0, 2, 3)
            bshape = (1, self.channels, 1, 1)
        else:
            raise ValueError(f"norm_forward expects CxHxW or BxCxHxW, got shape {x.shape}")
        if x.shape[caxis] != self.channels:
            raise ValueError(f"norm_forward: {x.shape[caxis]} channels, layer has {self.channels}")
        n_per_channel = x.size // self.channels
        if n_per_channel == 0:
            raise ValueError("norm_forward: zero spatial extent")

        if training:
            effective = domain
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            if update_stats is None or update_stats:
                m = self.momentum
                self.running_mean[domain][:] = (1 - m) * self.running_mean[domain] + m * mu
                self.running_var[domain][:] = (1 - m) * self.running_var[domain] + m * var
        else:
            effective = "source" if (self.switch_to_source and domain == "target") else domain
            mu = self.running_mean[effective]
            var = self.running_var[effective]

        gamma = self.gamma[effective]
        beta = self.beta[effective]
        inv = 1.0 / np.sqrt(var + self.eps)
        inv_b = inv.reshape(bshape)
        xhat = (x.data - mu.reshape(bshape)) * inv_b
        if self.capture_prenorm:
            self.last_prenorm = xhat
        out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
        batch_stats = training

        def backward(g):
            _accum(gamma, (g * xhat).sum(axis=axes))
            _accum(beta, g.sum(axis=axes))
            if x.requires_grad:
                gg = g * gamma.data.reshape(bshape)
                if batch_stats:
                    # mean/var depend on x; standard batch-norm input gradient
                    m1 = gg.mean(axis=axes, keepdims=True)
                    m2 = (gg * xhat).mean(axis=axes, keepdims=True)
                    _accum(x, inv_b * (gg - m1 - xhat * m2))
                else:
                    _accum(x, gg * inv_b)

        return register_op(out, (x, gamma, beta), backward)

    def parameters(self, domain=None):
        if domain is not None:
            return [self.gamma[domain], self.beta[domain]]
        params = [self.gamma["source"], self.beta["source"]]
        if self.gamma["target"] is not self.gamma["source"]:
            params += [self.gamma["target"], self.beta["target"]]
        return params

    def state_items(self, prefix):
        """(name, array) pairs for checkpointing, domain-labelled."""
        items = []
        for d in DOMAINS:
            items.append((f"{prefix}.{d}.gamma", self.gamma[d].data))
            items.append((f"{prefix}.{d}.beta", self.beta[d].data))
            items.append((f"{prefix}.{d}.running_mean", self.running_mean[d]))
            items.append((f"{prefix}.{d}.running_var", self.running_var[d]))
        return items


@dataclass(frozen=True)
class LayerSwitchSpec:
    """Contiguous 1-based range [start, end] of layer groups to switch.

    The empty spec (start=end=None) means no switch.
    """

    start: int | None = None
    end: int | None = None

    @property
    def empty(self):
        return self.start is None

    @classmethod
    def parse(cls, text):
        text = (text or "").strip().lower()
        if text in ("", "none", "no"):
            return cls()
        try:
            if "-" in text:
                lo, hi = text.split("-", 1)
                return cls(int(lo), int(hi))
            v = int(text)
            return cls(v, v)
        except ValueError:
            raise ValueError(f"cannot parse layer-switch range {text!r} (expected 'i-j' or '')") from None

    def validate(self, n_groups):
        if self.empty:
            return
        if not (1 <= self.start <= self.end <= n_groups):
            raise ValueError(f"layer-switch range {self.start}-{self.end} out of bounds for {n_groups} groups")

    def __str__(self):
        return "" if self.empty else f"{self.start}-{self.end}"


def apply_layer_switch(net, spec):
    """Set switch_to_source on every norm layer in the spec's group range."""
    groups = net.norm_groups()
    spec.validate(len(groups))
    if not spec.empty:
        for layers in groups[spec.start - 1:spec.end]:
            for layer in layers:
                layer.switch_to_source = True
    return net


def clear_layer_switch(net):
    for layers in net.norm_groups():
        for layer in layers:
            layer.switch_to_source = False
    return net


class layer_switch:
    """Context manager applying a switch spec for the duration of a block."""

    def __init__(self, net, spec):
        self.net = net
        self.spec = spec

    def __enter__(self):
        apply_layer_switch(self.net, self.spec)
        return self.net

    def __exit__(self, *exc):
        clear_layer_switch(self.net)
        return False
