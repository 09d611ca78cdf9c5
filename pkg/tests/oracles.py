"""Independent reference implementations used as test oracles.

Everything here is written the dumb, obviously-correct way (scalar loops,
per-pixel set arithmetic) and never calls into the library's compute paths.
"""

import numpy as np

LOG_EPS = 1e-7


def conv2d_oracle(x, w, b, stride, padding):
    """Direct nested-loop convolution."""
    c_in, h, w_in = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, w_in + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w_in] = x
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w_in + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for ki in range(k):
                        for kj in range(k):
                            acc += xp[ci, i * stride + ki, j * stride + kj] * w[co, ci, ki, kj]
                out[co, i, j] = acc + b[co]
    return out


def bilinear_weights_1d(n_in, n_out):
    """Hand formula for align-corners-false interpolation row weights."""
    rows = []
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        w = [0.0] * n_in
        w[min(max(i0, 0), n_in - 1)] += 1.0 - frac
        w[min(max(i0 + 1, 0), n_in - 1)] += frac
        rows.append(w)
    return np.array(rows)


def dis_loss_oracle(d_src_maps, d_trg_maps):
    total = 0.0
    for ds, dt in zip(d_src_maps, d_trg_maps):
        s_acc = 0.0
        for v in ds.reshape(-1):
            s_acc += np.log(max(1.0 - v, LOG_EPS))
        t_acc = 0.0
        for v in dt.reshape(-1):
            t_acc += np.log(max(v, LOG_EPS))
        total += s_acc / ds.size + t_acc / dt.size
    return -total / len(d_src_maps)


def adv_loss_oracle(d_trg_maps):
    total = 0.0
    for dt in d_trg_maps:
        acc = 0.0
        for v in dt.reshape(-1):
            acc += np.log(max(1.0 - v, LOG_EPS))
        total += acc / dt.size
    return -total / len(d_trg_maps)


def seg_loss_oracle(probs, labels, ignore=255):
    acc = 0.0
    count = 0
    h, w = labels.shape
    for i in range(h):
        for j in range(w):
            y = labels[i, j]
            if y == ignore:
                continue
            acc += np.log(max(probs[y, i, j], LOG_EPS))
            count += 1
    return 0.0 if count == 0 else -acc / count


def miou_bruteforce(preds, gts, num_classes, ignore=255):
    """Per-pixel set computation of intersections and unions."""
    ious = []
    for c in range(num_classes):
        inter = 0
        union = 0
        for p, g in zip(preds, gts):
            keep = g != ignore
            inter += int(np.sum((p == c) & (g == c) & keep))
            union += int(np.sum(((p == c) | (g == c)) & keep))
        if union > 0:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else 0.0


def standard_batchnorm_oracle(x, gamma, beta, eps, mean_val=None, var_val=None):
    """Textbook batch-norm formula, per channel over spatial positions."""
    if mean_val is None:
        mean_val = x.mean(axis=(1, 2))
        var_val = x.var(axis=(1, 2))
    xhat = (x - mean_val[:, None, None]) / np.sqrt(var_val[:, None, None] + eps)
    return gamma[:, None, None] * xhat + beta[:, None, None]
