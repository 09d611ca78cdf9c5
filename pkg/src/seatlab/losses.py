"""Objective functions for the adversarial adaptation and self-training stages.

Conventions shared by all losses here:
  - the discriminator emits probability-of-target, so a source sample scores
    log(1 - D(x)) and a target sample log(D(x));
  - every log clamps its argument to [LOG_EPS, inf);
  - per-sample terms average over pixels / discriminator locations, then the
    batch mean is taken, so magnitudes are resolution-independent;
  - label value 255 marks ignored pixels: zero loss, zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, log, mean, mul, scalar_mul, tsum
from .networks import FusedPrediction

IGNORE_INDEX = 255


def _as_batch(x):
    if isinstance(x, (list, tuple)):
        if not x:
            raise ValueError("empty batch")
        return list(x)
    return [x]


def _probs(p):
    return p.probs if isinstance(p, FusedPrediction) else p


def discriminator_loss(src_fused, trg_fused, disc):
    """Binary cross-entropy pushing D(source)->0 and D(target)->1.

    -(1/M) * sum_i [ mean log(1 - D(src_i)) + mean log(D(trg_i)) ]
    """
    src = _as_batch(src_fused)
    trg = _as_batch(trg_fused)
    if len(src) != len(trg):
        raise ValueError(f"batch mismatch: {len(src)} source vs {len(trg)} target samples")
    total = None
    for s, t in zip(src, trg):
        term = mean(log(1.0 - disc.forward(_probs(s)))) + mean(log(disc.forward(_probs(t))))
        total = term if total is None else total + term
    return scalar_mul(total, -1.0 / len(src))


def adversarial_loss(trg_fused, disc):
    """-(1/M) * sum_i mean log(1 - D(trg_i)): target output in source style."""
    trg = _as_batch(trg_fused)
    total = None
    for t in trg:
        term = mean(log(1.0 - disc.forward(_probs(t))))
        total = term if total is None else total + term
    return scalar_mul(total, -1.0 / len(trg))


def segmentation_loss(fused, labels, num_classes, ignore_index=IGNORE_INDEX):
    """Pixel cross-entropy of a probability map against an integer label map.

    Averages over non-ignored pixels; an all-ignored map contributes exactly
    zero loss and zero gradient.
    """
    probs = _probs(fused)
    labels = np.asarray(labels)
    if probs.ndim != 3 or probs.shape[0] != num_classes:
        raise ValueError(f"expected a {num_classes}xHxW probability map, got shape {probs.shape}")
    if labels.shape != probs.shape[1:]:
        raise ValueError(f"label shape {labels.shape} does not match map {probs.shape[1:]}")
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(f"labels contain invalid class ids: {sorted(np.unique(labels[bad]))}")
    ii, jj = np.nonzero(labels != ignore_index)
    if ii.size == 0:
        return Tensor(np.asarray(0.0, dtype=probs.dtype))
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[labels[ii, jj], ii, jj] = 1.0
    picked = mul(log(probs), Tensor(onehot, dtype=probs.dtype))
    return scalar_mul(tsum(picked), -1.0 / ii.size)


def self_training_loss(trg_fused, pseudo_labels, num_classes, ignore_index=IGNORE_INDEX):
    """Cross-entropy against thresholded pseudo-labels; same contract as
    segmentation_loss, applied to target-domain predictions."""
    return segmentation_loss(trg_fused, pseudo_labels, num_classes, ignore_index=ignore_index)


def total_loss(l_adv, l_seg, beta, l_st=None):
    """Generator objective: beta * adversarial + segmentation (+ self-training)."""
    beta = float(beta)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    out = scalar_mul(l_adv, beta) + l_seg
    if l_st is not None:
        out = out + l_st
    return out


@dataclass
class LossBundle:
    """Scalar loss values of one training step."""

    l_dis: float
    l_adv: float
    l_seg: float
    l_st: float
    l_ssn: float
    beta: float
    ignore_index: int = IGNORE_INDEX


class CrossEntropyKlResult(NamedTuple):
    cross_entropy: float
    kl_divergence: float
    entropy: float
    residual: float


def cross_entropy_kl_identity(a, b, tol=1e-9):
    """Numerically verify H(A,B) = KL(A,B) + H(A,A) for two distributions.

    Inputs must be strictly positive and sum to 1 within `tol`. Returns the
    three quantities and the residual H(A,B) - KL(A,B) - H(A,A).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    for name, p in (("A", a), ("B", b)):
        if abs(p.sum() - 1.0) > tol:
            raise ValueError(f"{name} is not normalized: sum = {p.sum()!r}")
        if (p <= 0).any():
            raise ValueError(f"{name} must have strictly positive entries")
    h_ab = -float(np.sum(a * np.log(b)))
    kl = float(np.sum(a * np.log(a) - a * np.log(b)))
    h_aa = -float(np.sum(a * np.log(a)))
    return CrossEntropyKlResult(h_ab, kl, h_aa, h_ab - kl - h_aa)
