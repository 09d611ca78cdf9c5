"""seatlab: a desk-scale training lab for adversarial domain adaptation in
semantic segmentation, with per-domain batch normalization, multi-level
output fusion, and self-training on a procedural synthetic benchmark."""

from .autodiff import Tensor, grad_check, no_grad
from .networks import Discriminator, FusedPrediction, SegmentationNet, fuse
from .normalization import DomainNormLayer, LayerSwitchSpec, apply_layer_switch
from .synthdata import DomainBatch, SceneSpec, dataset_split, generate_scene
from .training import TrainConfig, poly_lr, train_run
from .selftrain import generate_pseudo_labels, two_stage_pipeline
from .evaluation import miou

__version__ = "0.1.0"
