"""Optimizers, learning-rate schedule, and the alternating training loop.

Each iteration takes one generator step (segmentation + weighted adversarial
loss, self-training loss in stage 2) and then one discriminator step on
detached fused maps. The discriminator is frozen during the generator phase,
so its parameter gradients stay exactly zero there, and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, reset_tape
from .evaluation import evaluate_miou
from .losses import (LossBundle, adversarial_loss, discriminator_loss,
                     segmentation_loss, self_training_loss, total_loss)
from .networks import Discriminator, SegmentationNet, fuse, set_requires_grad
from .normalization import LayerSwitchSpec
from .synthdata import SceneSpec, dataset_split


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta: float = 0.001
    psi: float = 0.9
    max_iters: int = 3000
    eval_interval: int = 250
    seed: int = 0
    stage: int = 1
    norm_mode: str = "seat"
    layer_switch: str = ""
    lr_g: float = 2.5e-4
    lr_d: float = 1e-4
    image_size: int = 64
    num_classes: int = 5
    n_train_src: int = 500
    n_train_trg: int = 500
    n_eval_trg: int = 100
    appearance_shift: float = 1.0
    style_transfer: bool = False
    source_only: bool = False
    dtype: str = "float64"

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must be in [0, 1], got {self.psi}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.norm_mode not in ("sat", "seat"):
            raise ValueError(f"norm_mode must be 'sat' or 'seat', got {self.norm_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        if self.max_iters < 0 or self.eval_interval < 1:
            raise ValueError("max_iters must be >= 0 and eval_interval >= 1")
        LayerSwitchSpec.parse(self.layer_switch)
        return self

    def scene_spec(self):
        return SceneSpec.default(image_size=self.image_size, num_classes=self.num_classes,
                                 shift=self.appearance_shift,
                                 style_transfer_source=self.style_transfer)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def switch_spec(self):
        return LayerSwitchSpec.parse(self.layer_switch)


def poly_lr(iteration, max_iters, base_lr, power=0.9):
    """base_lr * (1 - iteration/max_iters) ** power."""
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** power


class SGD:
    """SGD with momentum and decoupled-from-nothing weight decay (added to the
    gradient, as usual). Parameters whose grad is None are left untouched."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= lr * buf
        self.steps += 1

    def state_items(self, prefix, param_names):
        items = [(f"{prefix}.steps", np.asarray(float(self.steps)))]
        for name, buf in zip(param_names, self.buffers):
            items.append((f"{prefix}.momentum.{name}", buf))
        return items


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.99), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_items(self, prefix, param_names):
        items = [(f"{prefix}.steps", np.asarray(float(self.steps)))]
        for name, m, v in zip(param_names, self.m, self.v):
            items.append((f"{prefix}.m.{name}", m))
            items.append((f"{prefix}.v.{name}", v))
        return items


def train_step(net, disc, opt_g, opt_d, src, trg, cfg, lr_g, lr_d, pseudo=None):
    """One generator update then one discriminator update.

    src must carry labels; in stage 2 `pseudo` carries the target pseudo-label
    map. Batch-norm running stats update once per domain (during the generator
    phase); the discriminator trains on detached fused maps.
    """
    if src.label is None:
        raise ValueError("source batch is missing labels")
    if cfg.stage == 2 and pseudo is None and not cfg.source_only:
        raise ValueError("stage 2 requires pseudo-labels for the target batch")
    n = cfg.num_classes

    # generator phase: discriminator frozen so its grads stay exactly zero
    reset_tape()
    opt_g.zero_grad()
    opt_d.zero_grad()
    set_requires_grad(disc.parameters(), False)
    f_ls, f_hs = net.forward(Tensor(src.image, dtype=cfg.np_dtype()), "source", training=True)
    src_fused = fuse(f_ls, f_hs, cfg.alpha)
    l_seg = segmentation_loss(src_fused, src.label, n)
    if cfg.source_only:
        l_ssn = l_seg
        l_ssn.backward()
        opt_g.step(lr_g)
        set_requires_grad(disc.parameters(), True)
        reset_tape()
        seg = l_seg.item()
        return LossBundle(l_dis=0.0, l_adv=0.0, l_seg=seg, l_st=0.0, l_ssn=seg, beta=cfg.beta)

    f_lt, f_ht = net.forward(Tensor(trg.image, dtype=cfg.np_dtype()), "target", training=True)
    trg_fused = fuse(f_lt, f_ht, cfg.alpha)
    l_adv = adversarial_loss(trg_fused, disc)
    l_st = None
    if cfg.stage == 2:
        l_st = self_training_loss(trg_fused, pseudo, n)
    l_ssn = total_loss(l_adv, l_seg, cfg.beta, l_st)
    l_ssn.backward()
    opt_g.step(lr_g)
    set_requires_grad(disc.parameters(), True)

    # discriminator phase on detached maps: generator grads stay exactly zero
    reset_tape()
    opt_g.zero_grad()
    opt_d.zero_grad()
    l_dis = discriminator_loss(src_fused.probs.detach(), trg_fused.probs.detach(), disc)
    l_dis.backward()
    opt_d.step(lr_d)
    reset_tape()

    return LossBundle(l_dis=l_dis.item(), l_adv=l_adv.item(), l_seg=l_seg.item(),
                      l_st=0.0 if l_st is None else l_st.item(),
                      l_ssn=l_ssn.item(), beta=cfg.beta)


@dataclass
class TrainResult:
    net: SegmentationNet
    disc: Discriminator
    history: list  # dict rows: iter, lr_g, lr_d, l_seg, l_adv, l_dis, l_st, miou_target
    final_miou: float
    dataset: object
    config: TrainConfig
    rng_order: np.random.Generator = None


def build_models(cfg):
    dt = cfg.np_dtype()
    rng_net = np.random.default_rng([cfg.seed, 101, cfg.stage])
    rng_disc = np.random.default_rng([cfg.seed, 151, cfg.stage])
    net = SegmentationNet(num_classes=cfg.num_classes, image_size=cfg.image_size,
                          norm_mode=cfg.norm_mode, rng=rng_net, dtype=dt)
    disc = Discriminator(in_channels=cfg.num_classes, rng=rng_disc, dtype=dt)
    return net, disc


def build_optimizers(net, disc, cfg):
    opt_g = SGD(net.parameters(), lr=cfg.lr_g, momentum=0.9, weight_decay=5e-4)
    opt_d = Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.9, 0.99), eps=1e-8)
    return opt_g, opt_d


def train_run(cfg, dataset=None, pseudo_labels=None, progress=None):
    """Full deterministic training run.

    `pseudo_labels`, when given, is a list aligned with the target-train split
    (stage 2). Metrics rows are appended every `eval_interval` iterations and
    at the final iteration. Returns the trained models, the history, and the
    final target mIoU.
    """
    cfg.validate()
    if dataset is None:
        dataset = dataset_split(cfg.scene_spec(), cfg.n_train_src, cfg.n_train_trg,
                                cfg.n_eval_trg, seed=cfg.seed)
    if cfg.stage == 2 and pseudo_labels is not None and len(pseudo_labels) != len(dataset.train_trg):
        raise ValueError("pseudo-label list does not match the target-train split")

    net, disc = build_models(cfg)
    opt_g, opt_d = build_optimizers(net, disc, cfg)
    rng_order = np.random.default_rng([cfg.seed, 202, cfg.stage])
    switch_spec = cfg.switch_spec()
    switch_spec.validate(len(net.norm_groups()))

    history = []
    final_miou = 0.0

    def run_eval():
        report = evaluate_miou(net, dataset.eval_trg, cfg.alpha, cfg.num_classes,
                               switch_spec=switch_spec)
        return report.miou

    if cfg.max_iters == 0:
        final_miou = run_eval()
        history.append({"iter": 0, "lr_g": 0.0, "lr_d": 0.0, "l_seg": 0.0, "l_adv": 0.0,
                        "l_dis": 0.0, "l_st": 0.0, "miou_target": final_miou})

    for it in range(cfg.max_iters):
        lr_g = poly_lr(it, cfg.max_iters, cfg.lr_g)
        lr_d = poly_lr(it, cfg.max_iters, cfg.lr_d)
        si = int(rng_order.integers(len(dataset.train_src)))
        ti = int(rng_order.integers(len(dataset.train_trg)))
        src = dataset.train_src[si]
        trg = dataset.train_trg[ti]
        pseudo = None
        if cfg.stage == 2 and pseudo_labels is not None:
            pseudo = pseudo_labels[ti]
        bundle = train_step(net, disc, opt_g, opt_d, src, trg, cfg, lr_g, lr_d, pseudo=pseudo)
        last = it + 1 == cfg.max_iters
        if (it + 1) % cfg.eval_interval == 0 or last:
            m = run_eval()
            if last:
                final_miou = m
            history.append({"iter": it + 1, "lr_g": lr_g, "lr_d": lr_d,
                            "l_seg": bundle.l_seg, "l_adv": bundle.l_adv,
                            "l_dis": bundle.l_dis, "l_st": bundle.l_st,
                            "miou_target": m})
            if progress is not None:
                progress(history[-1])

    return TrainResult(net=net, disc=disc, history=history, final_miou=final_miou,
                       dataset=dataset, config=cfg, rng_order=rng_order)


METRICS_COLUMNS = ("iter", "lr_g", "lr_d", "l_seg", "l_adv", "l_dis", "l_st", "miou_target")


def write_metrics_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in history:
            cells = [str(row["iter"])] + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]]
            f.write(",".join(cells) + "\n")
