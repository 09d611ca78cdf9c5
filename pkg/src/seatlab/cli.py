"""Command-line entry point, config files, checkpoints, run directories.

Config files are flat key=value text with keys exactly matching TrainConfig
field names; command-line flags override file values, and the env var
SEATLAB_SEED seeds a run only when neither source sets one. Checkpoints are
a small versioned binary container with named little-endian float64 blobs,
so round trips are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import struct
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation, selftrain, synthdata
from .autodiff import Tensor, grad_check
from .normalization import LayerSwitchSpec
from .training import TrainConfig, build_models, train_run, write_metrics_csv

CKPT_MAGIC = b"SEATCKPT"
CKPT_VERSION = 1
SEED_ENV_VAR = "SEATLAB_SEED"


# ---------------------------------------------------------------------------
# config files


def config_text(cfg):
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    Path(path).write_text(config_text(cfg), encoding="utf-8")


def _parse_value(field, raw):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {field.name!r}: cannot parse boolean {raw!r}")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw.strip()


def load_config_dict(path):
    """Parse a flat key=value file; unknown keys are an error, not a warning."""
    known = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
        values[key] = _parse_value(known[key], raw)
    return values


def load_config(path):
    return TrainConfig(**load_config_dict(path)).validate()


def config_fingerprint(cfg):
    return hashlib.sha256(config_text(cfg).encode()).digest()


# ---------------------------------------------------------------------------
# checkpoints


def _pack_rng(gen):
    if gen is None:
        return b""
    st = gen.bit_generator.state
    return (st["state"]["state"].to_bytes(16, "little")
            + st["state"]["inc"].to_bytes(16, "little")
            + int(st["has_uint32"]).to_bytes(4, "little")
            + int(st["uinteger"]).to_bytes(4, "little"))


def _unpack_rng(raw):
    if not raw:
        return None
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[0:16], "little"),
                  "inc": int.from_bytes(raw[16:32], "little")},
        "has_uint32": int.from_bytes(raw[32:36], "little"),
        "uinteger": int.from_bytes(raw[36:40], "little"),
    }
    return gen


def checkpoint_blobs(net, disc, opt_g=None, opt_d=None):
    items = list(net.state_items()) + list(disc.state_items())
    if opt_g is not None:
        names_g = [f"p{di:03d}" for di in range(len(opt_g.params))]
        items += opt_g.state_items("opt_g", names_g)
    if opt_d is not None:
        names_d = [f"p{di:03d}" for di in range(len(opt_d.params))]
        items += opt_d.state_items("opt_d", names_d)
    return items


def save_checkpoint(path, net, disc, opt_g=None, opt_d=None, iteration=0, rng=None, cfg=None):
    blobs = checkpoint_blobs(net, disc, opt_g, opt_d)
    fp = config_fingerprint(cfg) if cfg is not None else b"\x00" * 32
    rng_bytes = _pack_rng(rng)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(fp)
        f.write(struct.pack("<Q", int(iteration)))
        f.write(struct.pack("<I", len(rng_bytes)))
        f.write(rng_bytes)
        f.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            arr64 = np.ascontiguousarray(arr, dtype="<f8")
            name_b = name.encode()
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr64.ndim))
            f.write(struct.pack(f"<{arr64.ndim}I", *arr64.shape))
            f.write(arr64.tobytes())


class CheckpointData:
    def __init__(self, fingerprint, iteration, rng, blobs, order):
        self.fingerprint = fingerprint
        self.iteration = iteration
        self.rng = rng
        self.blobs = blobs
        self.order = order


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 12
    fingerprint = raw[pos:pos + 32]
    pos += 32
    (iteration,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    (rng_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    rng = _unpack_rng(raw[pos:pos + rng_len])
    pos += rng_len
    (n_blobs,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs = {}
    order = []
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        blobs[name] = arr
        order.append(name)
    return CheckpointData(fingerprint, iteration, rng, blobs, order)


def restore_models(data, net, disc, dtype=np.float64):
    for name, arr in list(net.state_items()) + list(disc.state_items()):
        if name not in data.blobs:
            raise ValueError(f"checkpoint is missing blob {name!r}")
        blob = data.blobs[name]
        if blob.shape != arr.shape:
            raise ValueError(f"checkpoint blob {name!r} has shape {blob.shape}, network expects {arr.shape}")
        arr[...] = blob.astype(dtype)


def restore_optimizers(data, opt_g, opt_d, dtype=np.float64):
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        steps = data.blobs.get(f"{prefix}.steps")
        if steps is None:
            continue
        opt.steps = int(np.asarray(steps).flat[0])
        buffers = ([("momentum", opt.buffers)] if prefix == "opt_g"
                   else [("m", opt.m), ("v", opt.v)])
        for kind, bufs in buffers:
            for di, buf in enumerate(bufs):
                blob = data.blobs[f"{prefix}.{kind}.p{di:03d}"]
                if blob.shape != buf.shape:
                    raise ValueError(f"optimizer blob {prefix}.{kind}.p{di:03d} shape mismatch")
                buf[...] = blob.astype(dtype)


# ---------------------------------------------------------------------------
# run directories


def write_run_dir(run_dir, cfg, result):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.txt")
    write_metrics_csv(run_dir / "metrics.csv", result.history)
    save_checkpoint(run_dir / "final.ckpt", result.net, result.disc,
                    iteration=cfg.max_iters, rng=result.rng_order, cfg=cfg)
    return run_dir


def load_run(run_dir):
    """Rebuild config and models from a run directory (eval-ready)."""
    run_dir = Path(run_dir)
    ckpt_path = run_dir / "final.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt_path}")
    cfg = load_config(run_dir / "config.txt")
    net, disc = build_models(cfg)
    data = load_checkpoint(ckpt_path)
    restore_models(data, net, disc, dtype=cfg.np_dtype())
    return cfg, net, disc


# ---------------------------------------------------------------------------
# gradient-check suite (the grad-check subcommand)


def gradient_suite(n_seeds=3, verbose=print):
    """Finite-difference checks over every op plus a composed objective.

    Returns the worst relative error seen; used by `seatlab grad-check`.
    """
    from .autodiff import (bilinear_upsample, clamp, conv2d, leaky_relu, log,
                           mean, relu, sigmoid, softmax_channels, tsum)
    from .losses import adversarial_loss, segmentation_loss, total_loss
    from .networks import Discriminator, SegmentationNet, fuse

    worst = 0.0

    def check(name, fn, x, **kw):
        nonlocal worst
        err = grad_check(fn, x, **kw)
        worst = max(worst, err)
        if verbose:
            verbose(f"  {name:<28s} max rel err {err:.3e}")
        return err

    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        a = Tensor(rng.standard_normal((3, 5, 5)))
        b = Tensor(rng.standard_normal((3, 5, 5)))
        check("add", lambda t: mean((t + b) * (t + b)), a)
        check("sub", lambda t: mean((t - b) * (t - b)), a)
        check("mul", lambda t: mean(t * b), a)
        check("scalar_mul", lambda t: tsum(t * 1.7), a)
        check("log", lambda t: mean(log(t)), Tensor(rng.uniform(0.2, 2.0, (4, 4))))
        check("relu", lambda t: mean(relu(t)), a)
        check("leaky_relu", lambda t: mean(leaky_relu(t, 0.2)), a)
        check("sigmoid", lambda t: mean(sigmoid(t)), a)
        check("clamp", lambda t: mean(clamp(t, -0.5, 0.5)), a)
        check("softmax_channels", lambda t: mean(log(softmax_channels(t))), a)
        up_w = Tensor(rng.standard_normal((2, 7, 9)))
        check("bilinear_upsample", lambda t: mean(bilinear_upsample(t, (7, 9)) * up_w),
              Tensor(rng.standard_normal((2, 3, 4))))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5)
        bias = Tensor(rng.standard_normal(4) * 0.1)
        check("conv2d (input)", lambda t: mean(conv2d(t, w, bias, stride=1, padding=1)
                                               * conv2d(t, w, bias, stride=1, padding=1)), a)

        # composed objective on a tiny net
        net = SegmentationNet(num_classes=3, image_size=16, rng=rng)
        disc = Discriminator(in_channels=3, rng=rng)
        labels = rng.integers(0, 3, (16, 16))
        x0 = Tensor(rng.uniform(0, 1, (3, 16, 16)))

        def composed(t):
            f_low, f_high = net.forward(t, "source", training=True, update_stats=False)
            fused = fuse(f_low, f_high, 0.2)
            l_seg = segmentation_loss(fused, labels, 3)
            l_adv = adversarial_loss(fused, disc)
            return total_loss(l_adv, l_seg, 0.001)

        # eps=1e-6 keeps interior activation kinks out of the difference interval
        check("composed objective", composed, x0, max_coords=24, eps=1e-6,
              rng=np.random.default_rng(seed))
    return worst


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--alpha", type=float, dest="alpha")
    p.add_argument("--beta", type=float, dest="beta")
    p.add_argument("--psi", type=float, dest="psi")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--stage", type=int, dest="stage")
    p.add_argument("--norm", choices=("sat", "seat"), dest="norm_mode")
    p.add_argument("--switch", dest="layer_switch")
    p.add_argument("--lr-g", type=float, dest="lr_g")
    p.add_argument("--lr-d", type=float, dest="lr_d")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--n-train-src", type=int, dest="n_train_src")
    p.add_argument("--n-train-trg", type=int, dest="n_train_trg")
    p.add_argument("--n-eval-trg", type=int, dest="n_eval_trg")
    p.add_argument("--shift", type=float, dest="appearance_shift")
    p.add_argument("--style-transfer", action="store_const", const=True, dest="style_transfer")
    p.add_argument("--source-only", action="store_const", const=True, dest="source_only")
    p.add_argument("--dtype", choices=("float64", "float32"), dest="dtype")


def effective_config(args):
    """defaults < SEATLAB_SEED env < config file < command-line flags."""
    values = {}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        values["seed"] = int(env_seed)
    if getattr(args, "config", None):
        values.update(load_config_dict(args.config))
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig(**values).validate()


def build_parser():
    parser = argparse.ArgumentParser(prog="seatlab",
                                     description="desk-scale domain-adaptation training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic splits as PPM/PGM + manifest")
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="single training run (stage 1, or stage 2 with pseudo-labels)")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--pseudo-manifest", help="pseudo-label manifest for a standalone stage-2 run")

    p = sub.add_parser("pseudo", help="generate pseudo-labels from a stage-1 run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--psi", type=float)
    p.add_argument("--out", help="output directory (default <run-dir>/pseudo)")

    p = sub.add_parser("selftrain", help="full two-stage pipeline")
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a run directory on its target eval split")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--switch", default=None, help="layer-switch range, e.g. 3-4 (default: the run's)")
    p.add_argument("--out", help="optional CSV report path")

    p = sub.add_parser("sweep-alpha", help="train at several fusion weights, CSV table out")
    _add_config_flags(p)
    p.add_argument("--alphas", default="0,0.01,0.05,0.1,0.2,0.4")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("sweep-switch", help="evaluate one run under several switch ranges")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--specs", default="none,4-4,3-4,2-4,1-4")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("histograms", help="export per-layer/domain activation histograms")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--layers", help="comma-separated layer names (default: all)")
    p.add_argument("--training", action="store_true", help="batch-statistics normalization")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("grad-check", help="finite-difference suite; exit 0 iff all < 1e-4")
    p.add_argument("--seeds", type=int, default=3)

    return parser


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_data(args):
    cfg = effective_config(args)
    spec = cfg.scene_spec()
    splits = synthdata.dataset_split(spec, cfg.n_train_src, cfg.n_train_trg,
                                     cfg.n_eval_trg, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for name, batches in zip(("train_src", "train_trg", "eval_trg"), splits):
        records += synthdata.export_split(out, name, batches)
    synthdata.write_manifest(out / "manifest.txt", records)
    save_config(cfg, out / "config.txt")
    print(f"wrote {len(records)} records under {out}")
    return 0


def _load_pseudo_from_manifest(manifest_path, expected):
    base = Path(manifest_path).parent
    records = synthdata.read_manifest(manifest_path)
    labels = [synthdata.read_pgm(base / rec[1]) for rec in records if rec[1]]
    if len(labels) != expected:
        raise ValueError(f"pseudo manifest holds {len(labels)} maps, target-train split has {expected}")
    return labels


def _cmd_train(args):
    cfg = effective_config(args)
    pseudo = None
    if cfg.stage == 2:
        if not args.pseudo_manifest:
            raise ValueError("stage 2 training requires --pseudo-manifest")
        pseudo = _load_pseudo_from_manifest(args.pseudo_manifest, cfg.n_train_trg)
    result = train_run(cfg, pseudo_labels=pseudo,
                       progress=lambda row: print(f"iter {row['iter']:>6d}  "
                                                  f"l_seg {row['l_seg']:.4f}  "
                                                  f"mIoU(target) {row['miou_target']:.4f}"))
    write_run_dir(args.out, cfg, result)
    print(f"final target mIoU {result.final_miou:.4f}; run dir: {args.out}")
    return 0


def _cmd_pseudo(args):
    cfg, net, _ = load_run(args.run_dir)
    psi = cfg.psi if args.psi is None else args.psi
    splits = synthdata.dataset_split(cfg.scene_spec(), cfg.n_train_src, cfg.n_train_trg,
                                     cfg.n_eval_trg, seed=cfg.seed)
    maps = selftrain.generate_pseudo_labels(net, splits.train_trg, psi, cfg.alpha)
    out = Path(args.out) if args.out else Path(args.run_dir) / "pseudo"
    manifest = selftrain.export_pseudo_labels(out, maps)
    cov = float(np.mean([m.coverage for m in maps]))
    print(f"wrote {len(maps)} pseudo maps (mean coverage {cov:.3f}, psi {psi}) to {manifest}")
    return 0


def _cmd_selftrain(args):
    cfg = effective_config(args)
    out = Path(args.out)
    result = selftrain.two_stage_pipeline(cfg, pseudo_dir=out / "pseudo")
    from dataclasses import replace
    write_run_dir(out / "stage1", replace(cfg, stage=1), result.stage1)
    write_run_dir(out / "stage2", replace(cfg, stage=2), result.stage2)
    print(f"stage 1 target mIoU {result.stage1_miou:.4f}")
    print(f"stage 2 target mIoU {result.stage2_miou:.4f} (pseudo coverage {result.mean_coverage:.3f})")
    return 0


def _cmd_eval(args):
    cfg, net, _ = load_run(args.run_dir)
    switch = cfg.layer_switch if args.switch is None else args.switch
    spec = LayerSwitchSpec.parse(switch)
    splits = synthdata.dataset_split(cfg.scene_spec(), cfg.n_train_src, cfg.n_train_trg,
                                     cfg.n_eval_trg, seed=cfg.seed)
    report = evaluation.evaluate_miou(net, splits.eval_trg, cfg.alpha, cfg.num_classes,
                                      switch_spec=spec)
    report.config_fingerprint = config_fingerprint(cfg).hex()
    report.seed = cfg.seed
    for c, v in enumerate(report.iou):
        print(f"class {c}: IoU {'n/a' if np.isnan(v) else f'{v:.4f}'}")
    print(f"mIoU {report.miou:.6f} (switch: {spec or 'none'})")
    if args.out:
        evaluation.write_switch_csv(args.out, [(str(spec) or "none", report.miou)])
    return 0


def _cmd_sweep_alpha(args):
    cfg = effective_config(args)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    alphas_out, medians, ranges = evaluation.sweep_alpha(cfg, alphas, seeds)
    evaluation.write_alpha_csv(args.out, alphas_out, medians, ranges)
    for a, m, r in zip(alphas_out, medians, ranges):
        print(f"alpha {a:<5g} median mIoU {m:.4f} (range {r:+.4f})")
    return 0


def _cmd_sweep_switch(args):
    cfg, net, _ = load_run(args.run_dir)
    splits = synthdata.dataset_split(cfg.scene_spec(), cfg.n_train_src, cfg.n_train_trg,
                                     cfg.n_eval_trg, seed=cfg.seed)
    specs = [s.strip() for s in args.specs.split(",")]
    rows = evaluation.sweep_layer_switch(net, splits.eval_trg, specs, cfg.alpha, cfg.num_classes)
    evaluation.write_switch_csv(args.out, rows)
    for name, value in rows:
        print(f"switch {name:<6s} mIoU {value:.4f}")
    return 0


def _cmd_histograms(args):
    cfg, net, _ = load_run(args.run_dir)
    splits = synthdata.dataset_split(cfg.scene_spec(), cfg.n_train_src, cfg.n_train_trg,
                                     cfg.n_eval_trg, seed=cfg.seed)
    batches = {"source": splits.train_src[:args.batches],
               "target": splits.eval_trg[:args.batches]}
    layer_names = args.layers.split(",") if args.layers else None
    hists = evaluation.collect_feature_histograms(net, batches, layer_names=layer_names,
                                                  training=args.training)
    evaluation.write_histograms_csv(args.out, hists)
    print(f"wrote {len(hists)} histograms to {args.out}")
    return 0


def _cmd_grad_check(args):
    worst = gradient_suite(n_seeds=args.seeds)
    ok = worst < 1e-4
    print(f"worst relative error {worst:.3e}: {'OK' if ok else 'FAILED'}")
    return 0 if ok else 1


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "pseudo": _cmd_pseudo,
    "selftrain": _cmd_selftrain,
    "eval": _cmd_eval,
    "sweep-alpha": _cmd_sweep_alpha,
    "sweep-switch": _cmd_sweep_switch,
    "histograms": _cmd_histograms,
    "grad-check": _cmd_grad_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
