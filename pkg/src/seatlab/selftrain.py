"""Pseudo-label generation and the two-stage pipeline.

Stage 1 trains on source labels plus the adversarial term. The trained model
then labels each target-train image wherever its fused prediction clears the
confidence threshold psi (everything else gets the ignore value 255), and
stage 2 retrains a reinitialized generator with the extra self-training term.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .networks import fuse
from .synthdata import write_manifest, write_pgm
from .training import train_run

IGNORE_INDEX = 255


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) ints in {0..N-1, 255}
    coverage: float  # fraction of non-ignored pixels
    psi: float


def pseudo_labels_from_probs(probs, psi):
    """Argmax where the winning probability clears psi, 255 elsewhere.

    Ties go to the lowest class index (np.argmax convention).
    """
    psi = float(psi)
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi must be in [0, 1], got {psi}")
    probs = np.asarray(probs)
    kappa = np.argmax(probs, axis=0)
    pmax = np.take_along_axis(probs, kappa[None], axis=0)[0]
    labels = np.where(pmax >= psi, kappa, IGNORE_INDEX).astype(np.int64)
    coverage = float((labels != IGNORE_INDEX).mean())
    return PseudoLabelMap(labels=labels, coverage=coverage, psi=psi)


def generate_pseudo_labels(net, batches, psi, alpha):
    """Label a list of target DomainBatch with the eval-mode fused prediction."""
    out = []
    for b in batches:
        with no_grad():
            f_low, f_high = net.forward(Tensor(b.image), "target", training=False)
            fused = fuse(f_low, f_high, alpha)
        out.append(pseudo_labels_from_probs(fused.probs.data, psi))
    return out


def export_pseudo_labels(out_dir, maps):
    """Write pseudo maps as PGM plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, m in enumerate(maps):
        rel = f"pseudo_{i:05d}.pgm"
        write_pgm(out_dir / rel, m.labels)
        records.append(("-", rel, "target"))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, records)
    return manifest


@dataclass
class PipelineResult:
    stage1: object  # TrainResult
    stage2: object
    pseudo: list  # PseudoLabelMap per target-train image
    stage1_miou: float
    stage2_miou: float
    mean_coverage: float


def two_stage_pipeline(cfg, pseudo_dir=None, progress=None):
    """Stage-1 run, pseudo-label generation at cfg.psi, stage-2 run.

    The stage-2 generator and discriminator are reinitialized; the dataset is
    shared so both stages see the same images.
    """
    cfg.validate()
    stage1_cfg = replace(cfg, stage=1)
    stage1 = train_run(stage1_cfg, progress=progress)

    pseudo = generate_pseudo_labels(stage1.net, stage1.dataset.train_trg, cfg.psi, cfg.alpha)
    if pseudo_dir is not None:
        export_pseudo_labels(pseudo_dir, pseudo)

    stage2_cfg = replace(cfg, stage=2)
    stage2 = train_run(stage2_cfg, dataset=stage1.dataset,
                       pseudo_labels=[m.labels for m in pseudo], progress=progress)
    return PipelineResult(stage1=stage1, stage2=stage2, pseudo=pseudo,
                          stage1_miou=stage1.final_miou, stage2_miou=stage2.final_miou,
                          mean_coverage=float(np.mean([m.coverage for m in pseudo])))
