"""Reverse-mode automatic differentiation on numpy arrays.

Define-by-run: every op appends one entry to the active tape, and
``backward()`` replays the tape in reverse, accumulating gradients across
fan-out. Float64 is the default so finite-difference checks are tight;
float32 is available for faster training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_DTYPE = np.float64

# every log() in the package clamps its argument to [LOG_EPS, inf)
LOG_EPS = 1e-7


class Tensor:
    """An n-dimensional array plus an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Same data, cut off from the tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self):
        active_tape().backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return scalar_add(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return scalar_add(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return scalar_add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        return scalar_mul(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _is_number(x):
    return isinstance(x, (int, float, np.integer, np.floating))


class Tape:
    """Ordered record of executed ops for one forward/backward cycle."""

    def __init__(self):
        self._entries = []  # (output, inputs, backward_fn) in execution order
        self.enabled = True

    def __len__(self):
        return len(self._entries)

    def record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))

    def reset(self):
        self._entries.clear()

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and replay entries reachable from `loss`.

        Execution order is already topological, so a single reverse sweep
        visits each recorded op at most once. Entries whose output does not
        feed `loss` are skipped.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        needed = {id(loss)}
        for out, inputs, backward_fn in reversed(self._entries):
            if id(out) not in needed or out.grad is None:
                continue
            backward_fn(out.grad)
            for t in inputs:
                needed.add(id(t))


_ACTIVE = Tape()


def active_tape():
    return _ACTIVE


def reset_tape():
    _ACTIVE.reset()


@contextlib.contextmanager
def fresh_tape(enabled=True):
    """Temporarily swap in a new tape (used by grad checks and eval loops)."""
    global _ACTIVE
    saved = _ACTIVE
    _ACTIVE = Tape()
    _ACTIVE.enabled = enabled
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = saved


@contextlib.contextmanager
def no_grad():
    saved = _ACTIVE.enabled
    _ACTIVE.enabled = False
    try:
        yield
    finally:
        _ACTIVE.enabled = saved


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # copy: g may alias another grad
    else:
        t.grad += g


def register_op(out_data, inputs, backward_fn):
    """Create the output tensor of an op and record it on the active tape.

    `backward_fn(g)` receives d(loss)/d(out) and must _accum into each input.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires and _ACTIVE.enabled:
        _ACTIVE.record(out, inputs, backward_fn)
    return out


def _check_same_shape(x, y, name):
    if x.data.shape != y.data.shape:
        raise ValueError(f"{name}: shape mismatch {x.data.shape} vs {y.data.shape}")


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise suite


def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same_shape(x, y, "add")

    def backward(g):
        _accum(x, g)
        _accum(y, g)

    return register_op(x.data + y.data, (x, y), backward)


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same_shape(x, y, "sub")

    def backward(g):
        _accum(x, g)
        _accum(y, -g)

    return register_op(x.data - y.data, (x, y), backward)


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _check_same_shape(x, y, "mul")

    def backward(g):
        _accum(x, g * y.data)
        _accum(y, g * x.data)

    return register_op(x.data * y.data, (x, y), backward)


def scalar_mul(x, s):
    x = as_tensor(x)
    s = float(s)

    def backward(g):
        _accum(x, g * s)

    return register_op(x.data * s, (x,), backward)


def scalar_add(x, s):
    x = as_tensor(x)
    s = float(s)

    def backward(g):
        _accum(x, g)

    return register_op(x.data + s, (x,), backward)


def log(x, eps=LOG_EPS):
    """Natural log of max(x, eps); the clamped region gets zero gradient."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, eps)

    def backward(g):
        _accum(x, np.where(x.data > eps, g / clamped, 0.0))

    return register_op(np.log(clamped), (x,), backward)


def relu(x):
    x = as_tensor(x)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return register_op(np.maximum(x.data, 0.0), (x,), backward)


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)

    def backward(g):
        _accum(x, g * np.where(x.data > 0, 1.0, slope))

    return register_op(np.where(x.data > 0, x.data, slope * x.data), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return register_op(out, (x,), backward)


def clamp(x, lo, hi):
    """Clip into [lo, hi]; gradient passes through inside, zero outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accum(x, g * inside)

    return register_op(np.clip(x.data, lo, hi), (x,), backward)


def mean(x):
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return register_op(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward)


def tsum(x):
    x = as_tensor(x)

    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return register_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D convolution (cross-correlation) of a CxHxW input.

    weight: (C_out, C_in, k, k), bias: (C_out,). Output spatial size is
    floor((H + 2*padding - k)/stride) + 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3:
        raise ValueError(f"conv2d expects a CxHxW input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d expects (C_out, C_in, k, k) weights, got {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, k, _ = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d: weight expects {wc_in} input channels, input has {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {k} larger than padded input ({h}+2*{padding}, {w}+2*{padding})")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C_in, h_out, w_out, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, h_out * w_out)
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = (w_mat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def backward(g):
        g_mat = g.reshape(c_out, h_out * w_out)
        _accum(bias, g_mat.sum(axis=1))
        _accum(weight, (g_mat @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            dcols = (w_mat.T @ g_mat).reshape(c_in, k, k, h_out, w_out)
            dpad = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dpad[:, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += dcols[:, ki, kj]
            dx = dpad[:, padding:padding + h, padding:padding + w] if padding else dpad
            _accum(x, dx)

    return register_op(out, (x, weight, bias), backward)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis of an NxHxW map.

    Max-subtracted for stability; each pixel's channel values sum to 1.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"softmax_channels expects an NxHxW map, got shape {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        _accum(x, p * (g - (p * g).sum(axis=0, keepdims=True)))

    return register_op(p, (x,), backward)


@lru_cache(maxsize=None)
def _interp_matrix(n_in, n_out):
    """Row-interpolation matrix for bilinear resize, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
    else:
        scale = n_in / n_out
        for i in range(n_out):
            src = (i + 0.5) * scale - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            lo = min(max(i0, 0), n_in - 1)
            hi = min(max(i0 + 1, 0), n_in - 1)
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
    m.setflags(write=False)
    return m


def bilinear_upsample(x, target):
    """Resize a CxhxW map to `target` (H, W) with bilinear interpolation.

    Separable: out = R @ x @ C^T per channel, which keeps the backward pass
    a pair of matrix products.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"bilinear_upsample expects a Cxhxw input, got shape {x.shape}")
    h_out, w_out = int(target[0]), int(target[1])
    _, h_in, w_in = x.shape
    if h_out < h_in or w_out < w_in:
        raise ValueError(f"bilinear_upsample: target {(h_out, w_out)} smaller than source {(h_in, w_in)}")
    rm = _interp_matrix(h_in, h_out).astype(x.data.dtype, copy=False)
    cm = _interp_matrix(w_in, w_out).astype(x.data.dtype, copy=False)
    out = np.einsum("Hh,chw,Ww->cHW", rm, x.data, cm, optimize=True)

    def backward(g):
        _accum(x, np.einsum("Hh,cHW,Ww->chw", rm, g, cm, optimize=True))

    return register_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    skipped: list = field(default_factory=list)


def grad_check_report(f, x, eps=1e-5, max_coords=None, rng=None, kink_tol=1e-4):
    """Compare analytic gradients of scalar-valued `f` against central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    Coordinates where the two one-sided slopes disagree by more than
    `kink_tol` (relative) straddle a non-differentiable point (clamp or relu
    kink, possibly deep inside a composed function) and are skipped, with the
    count reported. For deep compositions prefer eps=1e-6: the chance of a
    perturbation crossing an interior kink scales with eps.
    """
    base = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True),
                  requires_grad=True)
    with fresh_tape():
        y = f(base)
        if y.data.size != 1:
            raise ValueError(f"grad_check requires a scalar-valued function, got shape {y.shape}")
        y.backward()
    analytic = base.grad if base.grad is not None else np.zeros_like(base.data)

    def value_at(t):
        with fresh_tape(enabled=False):
            return float(f(t).data)

    flat = np.arange(base.data.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(flat, size=max_coords, replace=False)
    f0 = value_at(base)

    max_rel = 0.0
    skipped = []
    for fi in flat:
        idx = np.unravel_index(fi, base.data.shape)
        orig = base.data[idx]
        base.data[idx] = orig + eps
        fp = value_at(base)
        base.data[idx] = orig - eps
        fm = value_at(base)
        base.data[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        d_plus = (fp - f0) / eps
        d_minus = (f0 - fm) / eps
        if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
            skipped.append(idx)
            continue
        rel = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_err=max_rel, n_checked=len(flat) - len(skipped),
                           n_skipped=len(skipped), skipped=skipped)


def grad_check(f, x, eps=1e-5, max_coords=None, rng=None, kink_tol=1e-4):
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(f, x, eps=eps, max_coords=max_coords, rng=rng,
                             kink_tol=kink_tol).max_rel_err
