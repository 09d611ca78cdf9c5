"""Procedural paired-domain segmentation benchmark.

Scenes are a handful of colored shapes on a textured background. Geometry
(shape classes, positions, sizes, the ignore ring) is drawn from a stream
keyed only by the scene seed, so a source and a target scene with the same
seed share an identical label map. Appearance (palette, texture, noise,
brightness/contrast) is domain-specific, which is the whole domain shift:
covariate shift by construction, geometry distribution shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IGNORE_INDEX = 255

_GEO_STREAM = 7919
_APP_STREAM = 104729


@dataclass(frozen=True)
class DomainAppearance:
    palette: tuple  # (num_classes, 3) rows in [0, 1]
    noise_sigma: float
    texture_freq: float
    texture_amp: float
    brightness: float
    contrast: float


def _base_palette(num_classes):
    colors = [
        (0.26, 0.26, 0.30),  # background
        (0.78, 0.30, 0.24),
        (0.28, 0.66, 0.30),
        (0.24, 0.36, 0.78),
        (0.80, 0.72, 0.24),
        (0.70, 0.30, 0.70),
        (0.25, 0.70, 0.70),
        (0.85, 0.50, 0.20),
    ]
    if num_classes > len(colors):
        extra = np.random.default_rng(12345).uniform(0.15, 0.85, (num_classes - len(colors), 3))
        colors = colors + [tuple(c) for c in extra]
    return tuple(colors[:num_classes])


_CLASS_DRIFT = [
    (+0.10, +0.04, -0.06),
    (-0.14, +0.06, +0.10),
    (+0.10, -0.10, +0.12),
    (+0.06, +0.10, -0.14),
    (-0.12, -0.08, +0.10),
    (+0.12, -0.06, -0.08),
    (-0.08, +0.12, -0.06),
    (-0.06, -0.10, +0.12),
]


def _palette_drift(num_classes):
    drift = list(_CLASS_DRIFT)
    if num_classes > len(drift):
        extra = np.random.default_rng(54321).uniform(-0.14, 0.14, (num_classes - len(drift), 3))
        drift += [tuple(d) for d in extra]
    return np.array(drift[:num_classes])


def default_appearances(num_classes, shift=1.0):
    """Source appearance plus a target appearance displaced by `shift`.

    shift=0 collapses the two domains; shift=1 is the stock benchmark gap.
    Each class's color drifts in its own direction (so no single global
    transform undoes the shift), on top of a darker/flatter tone, heavier
    noise, and busier texture.
    """
    src_palette = np.array(_base_palette(num_classes))
    trg_palette = np.clip(src_palette + _palette_drift(num_classes) * shift, 0.0, 1.0)
    source = DomainAppearance(
        palette=tuple(map(tuple, src_palette)),
        noise_sigma=0.02,
        texture_freq=3.0,
        texture_amp=0.03,
        brightness=0.0,
        contrast=1.0,
    )
    target = DomainAppearance(
        palette=tuple(map(tuple, trg_palette)),
        noise_sigma=0.02 + 0.04 * shift,
        texture_freq=7.0,
        texture_amp=0.03 + 0.05 * shift,
        brightness=-0.10 * shift,
        contrast=1.0 - 0.20 * shift,
    )
    return source, target


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 5
    min_shapes: int = 2
    max_shapes: int = 5
    boundary_ignore_prob: float = 0.3
    source: DomainAppearance = field(default=None)
    target: DomainAppearance = field(default=None)
    style_transfer_source: bool = False  # render source geometry in target style

    @classmethod
    def default(cls, image_size=64, num_classes=5, shift=1.0, style_transfer_source=False):
        src, trg = default_appearances(num_classes, shift)
        return cls(image_size=image_size, num_classes=num_classes,
                   source=src, target=trg, style_transfer_source=style_transfer_source)


@dataclass
class DomainBatch:
    """One image with an optional label map and its domain tag."""

    image: np.ndarray  # (3, H, W) float in [0, 1]
    label: np.ndarray | None  # (H, W) ints in {0..N-1, 255}, or withheld
    domain: str


def _paint_shape(kind, geo, size, yy, xx):
    s = yy.shape[0]
    margin = s * 0.14
    cx = geo.uniform(margin, s - margin)
    cy = geo.uniform(margin, s - margin)
    r = geo.uniform(s * 0.11, s * 0.23)
    if kind == 0:  # disk
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:  # rectangle
        hw = r * geo.uniform(0.7, 1.3)
        hh = r * geo.uniform(0.7, 1.3)
        return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
    if kind == 2:  # isoceles triangle, apex up
        h = 2 * r
        rel = yy - (cy - r)
        return (rel >= 0) & (rel <= h) & (np.abs(xx - cx) <= rel * 0.6)
    # ring
    r_in = r * geo.uniform(0.45, 0.6)
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return (d2 <= r * r) & (d2 >= r_in * r_in)


def _boundary_mask(label):
    edge = np.zeros(label.shape, dtype=bool)
    edge[:-1, :] |= label[:-1, :] != label[1:, :]
    edge[1:, :] |= label[:-1, :] != label[1:, :]
    edge[:, :-1] |= label[:, :-1] != label[:, 1:]
    edge[:, 1:] |= label[:, :-1] != label[:, 1:]
    return edge


def generate_scene(seed, domain, spec):
    """Render one scene. Geometry depends only on `seed`; appearance on the
    domain's parameters plus a domain-keyed noise stream."""
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    if spec.num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {spec.num_classes}")
    s = spec.image_size
    geo = np.random.default_rng([int(seed), _GEO_STREAM])
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    label = np.zeros((s, s), dtype=np.int64)
    n_shapes = int(geo.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(geo.integers(1, spec.num_classes))
        mask = _paint_shape((cls - 1) % 4, geo, s, yy, xx)
        label[mask] = cls
    ignore_ring = geo.random() < spec.boundary_ignore_prob

    if domain == "target" or (domain == "source" and spec.style_transfer_source):
        app = spec.target
    else:
        app = spec.source
    rng_app = np.random.default_rng([int(seed), _APP_STREAM, 0 if domain == "source" else 1])

    palette = np.asarray(app.palette, dtype=np.float64)
    img = palette[label].transpose(2, 0, 1).copy()  # (3, H, W)

    theta = rng_app.uniform(0, np.pi)
    phase = rng_app.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * app.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) / s + phase)
    img += app.texture_amp * wave[None]
    img += rng_app.uniform(-0.03, 0.03, size=(3, 1, 1))  # per-scene color jitter
    img += rng_app.normal(0.0, app.noise_sigma, size=img.shape)
    img = app.contrast * (img - 0.5) + 0.5 + app.brightness
    np.clip(img, 0.0, 1.0, out=img)

    out_label = label.copy()
    if ignore_ring:
        out_label[_boundary_mask(label)] = IGNORE_INDEX
    return DomainBatch(image=img, label=out_label, domain=domain)


def generate_batches(spec, domain, count, seed0, labeled=True):
    """`count` scenes with consecutive seeds starting at seed0."""
    batches = []
    for i in range(count):
        b = generate_scene(seed0 + i, domain, spec)
        if not labeled:
            b.label = None
        batches.append(b)
    return batches


class DatasetSplits(NamedTuple):
    train_src: list
    train_trg: list
    eval_trg: list


def dataset_split(spec, n_train_src=500, n_train_trg=500, n_eval_trg=100, seed=0):
    """Three disjoint-seed splits; target-train labels are withheld so the
    training loop cannot touch them."""
    for name, n in (("n_train_src", n_train_src), ("n_train_trg", n_train_trg), ("n_eval_trg", n_eval_trg)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1, got {n}")
    base = int(seed) * 1_000_003
    train_src = generate_batches(spec, "source", n_train_src, base)
    train_trg = generate_batches(spec, "target", n_train_trg, base + n_train_src, labeled=False)
    eval_trg = generate_batches(spec, "target", n_eval_trg, base + n_train_src + n_train_trg)
    return DatasetSplits(train_src, train_trg, eval_trg)


# ---------------------------------------------------------------------------
# on-disk formats: binary PPM images, binary PGM label maps, plain manifest


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got shape {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, dims, maxval, raw = _parse_pnm(data, b"P6")
    w, h = dims
    img = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / float(maxval)


def write_pgm(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected an HxW label map, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in one byte")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(labels.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    _, dims, _, raw = _parse_pnm(data, b"P5")
    w, h = dims
    return np.frombuffer(raw, dtype=np.uint8, count=h * w).reshape(h, w).astype(np.int64)


def _parse_pnm(data, expect_magic):
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != expect_magic:
        raise ValueError(f"bad magic {tokens[0]!r}, expected {expect_magic!r}")
    return tokens[0], (int(tokens[1]), int(tokens[2])), int(tokens[3]), data[pos:]


def write_manifest(path, records):
    """One record per line: image path, label path or '-', domain."""
    with open(path, "w", encoding="utf-8") as f:
        for image_path, label_path, domain in records:
            f.write(f"{image_path} {label_path or '-'} {domain}\n")


def read_manifest(path):
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        image_path, label_path, domain = line.split()
        records.append((image_path, None if label_path == "-" else label_path, domain))
    return records


def export_split(out_dir, name, batches):
    """Write a split's PPM/PGM files and return its manifest records."""
    out_dir = Path(out_dir)
    (out_dir / name).mkdir(parents=True, exist_ok=True)
    records = []
    for i, b in enumerate(batches):
        img_rel = f"{name}/{i:05d}.ppm"
        write_ppm(out_dir / img_rel, b.image)
        if b.label is not None:
            lab_rel = f"{name}/{i:05d}.pgm"
            write_pgm(out_dir / lab_rel, b.label)
        else:
            lab_rel = None
        records.append((img_rel, lab_rel, b.domain))
    return records
