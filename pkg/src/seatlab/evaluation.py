"""Metrics, feature-distribution capture, and the evaluation sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .normalization import LayerSwitchSpec, layer_switch
from .networks import fuse

IGNORE_INDEX = 255


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (N, N) rows = ground truth, cols = prediction
    iou: np.ndarray  # per class, NaN where the class is absent on both sides
    miou: float
    num_classes: int
    config_fingerprint: str = ""
    seed: int | None = None


def confusion_matrix(preds, gts, num_classes, ignore_index=IGNORE_INDEX):
    preds = np.asarray(preds).reshape(-1)
    gts = np.asarray(gts).reshape(-1)
    if preds.shape != gts.shape:
        raise ValueError(f"prediction/label shape mismatch {preds.shape} vs {gts.shape}")
    keep = gts != ignore_index
    preds = preds[keep]
    gts = gts[keep]
    if ((gts < 0) | (gts >= num_classes)).any():
        raise ValueError("ground-truth labels contain invalid class ids")
    if ((preds < 0) | (preds >= num_classes)).any():
        raise ValueError("predictions contain invalid class ids")
    idx = gts * num_classes + preds
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(preds, gts, num_classes, ignore_index=IGNORE_INDEX, class_mask=None):
    """Per-class intersection-over-union and its mean.

    `preds`/`gts` are argmax/label maps or lists of them. Classes absent
    from both prediction and ground truth (0/0) are excluded from the mean,
    as is anything outside `class_mask` when a subset is evaluated.
    """
    if not isinstance(preds, (list, tuple)):
        preds, gts = [preds], [gts]
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(p, g, num_classes, ignore_index)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    iou = np.full(num_classes, np.nan)
    nz = denom > 0
    iou[nz] = tp[nz] / denom[nz]
    if class_mask is not None:
        class_mask = np.asarray(class_mask, dtype=bool)
        iou = np.where(class_mask, iou, np.nan)
    valid = ~np.isnan(iou)
    mean_iou = float(iou[valid].mean()) if valid.any() else 0.0
    return MetricsReport(confusion=conf, iou=iou, miou=mean_iou, num_classes=num_classes)


def predict_labels(net, batch, alpha, switch_spec=None):
    """Eval-mode fused argmax prediction for one DomainBatch."""
    spec = switch_spec or LayerSwitchSpec()
    with no_grad(), layer_switch(net, spec):
        f_low, f_high = net.forward(Tensor(batch.image), batch.domain, training=False)
        fused = fuse(f_low, f_high, alpha)
    return np.argmax(fused.probs.data, axis=0)


def evaluate_miou(net, batches, alpha, num_classes, switch_spec=None, class_mask=None):
    preds = [predict_labels(net, b, alpha, switch_spec) for b in batches]
    gts = [b.label for b in batches]
    return miou(preds, gts, num_classes, class_mask=class_mask)


# ---------------------------------------------------------------------------
# feature histograms


@dataclass
class FeatureHistogram:
    layer: str
    domain: str
    bin_edges: np.ndarray  # len bins + 1
    counts: np.ndarray  # len bins
    sample_count: int = 0

    def merge_values(self, values):
        v = np.clip(values.reshape(-1), self.bin_edges[0], self.bin_edges[-1])
        c, _ = np.histogram(v, bins=self.bin_edges)
        self.counts += c
        self.sample_count += v.size


def collect_feature_histograms(net, batches_by_domain, layer_names=None, bins=80,
                               value_range=(-5.0, 5.0), training=False):
    """Histogram the normalized, pre-affine activations of chosen norm layers.

    `batches_by_domain` maps "source"/"target" to lists of DomainBatch.
    Outliers are clamped into the edge bins so counts always sum to the
    number of activations seen. Running statistics are never updated, even
    with training=True (batch-statistics normalization, frozen layer state).
    """
    layers = net.norm_layers()
    if layer_names is None:
        layer_names = list(layers)
    unknown = [n for n in layer_names if n not in layers]
    if unknown:
        raise ValueError(f"unknown layer names: {unknown}; available: {list(layers)}")
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    hists = {}
    for name in layer_names:
        layers[name].capture_prenorm = True
    try:
        for domain, batches in batches_by_domain.items():
            for b in batches:
                with no_grad():
                    net.forward(Tensor(b.image), domain, training=training, update_stats=False)
                for name in layer_names:
                    key = (name, domain)
                    if key not in hists:
                        hists[key] = FeatureHistogram(layer=name, domain=domain,
                                                      bin_edges=edges.copy(), counts=np.zeros(bins, dtype=np.int64))
                    hists[key].merge_values(layers[name].last_prenorm)
    finally:
        for name in layer_names:
            layers[name].capture_prenorm = False
            layers[name].last_prenorm = None
    return list(hists.values())


def write_histograms_csv(path, hists):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "domain", "bin_left", "count"])
        for h in hists:
            for left, count in zip(h.bin_edges[:-1], h.counts):
                w.writerow([h.layer, h.domain, repr(float(left)), int(count)])


def histogram_l1_distance(h_a, h_b):
    """L1 distance between two histograms as normalized frequencies."""
    fa = h_a.counts / max(h_a.sample_count, 1)
    fb = h_b.counts / max(h_b.sample_count, 1)
    return float(np.abs(fa - fb).sum())


# ---------------------------------------------------------------------------
# sweeps


def sweep_alpha(base_cfg, alphas, seeds):
    """One training run per (alpha, seed); rows of median target mIoU per alpha.

    Returns (alphas, medians, ranges) where ranges[i] = median[i] - median at
    alpha = 0 (0.0 exactly when alpha == 0 is in the list).
    """
    from dataclasses import replace

    from .training import train_run

    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {a}")
    medians = []
    for a in alphas:
        finals = []
        for s in seeds:
            cfg = replace(base_cfg, alpha=float(a), seed=int(s))
            result = train_run(cfg)
            finals.append(result.final_miou)
        medians.append(float(np.median(finals)))
    if 0.0 in [float(a) for a in alphas]:
        ref = medians[[float(a) for a in alphas].index(0.0)]
    else:
        ref = medians[0]
    ranges = [m - ref for m in medians]
    return list(alphas), medians, ranges


def write_alpha_csv(path, alphas, medians, ranges):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["alpha"] + [repr(float(a)) for a in alphas])
        w.writerow(["miou"] + [repr(float(m)) for m in medians])
        w.writerow(["range"] + [repr(float(r)) for r in ranges])


def sweep_layer_switch(net, eval_batches, specs, alpha, num_classes):
    """Evaluate one trained network under several switch ranges (read-only)."""
    rows = []
    for spec in specs:
        if isinstance(spec, str):
            spec = LayerSwitchSpec.parse(spec)
        report = evaluate_miou(net, eval_batches, alpha, num_classes, switch_spec=spec)
        rows.append((str(spec) or "none", report.miou))
    return rows


def write_switch_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["switch", "miou"])
        for name, value in rows:
            w.writerow([name, repr(float(value))])


def prediction_to_ppm(path, pred, gt, palette):
    """Side-by-side color dump of prediction vs ground truth (ignore = black)."""
    from .synthdata import write_ppm

    palette = np.asarray(palette, dtype=np.float64)
    h, w = pred.shape

    def colorize(m):
        img = np.zeros((h, w, 3))
        shown = m != IGNORE_INDEX
        img[shown] = palette[m[shown]]
        return img.transpose(2, 0, 1)

    panel = np.concatenate([colorize(pred), colorize(gt)], axis=2)
    write_ppm(path, panel)
