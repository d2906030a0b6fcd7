"""Source-free domain adaptation for nested disc/cup segmentation by
self-training on locally and globally corrected pseudo-labels."""

from .dataset import ImageSample, SynthConfig, SynthShift, generate_synthetic, load_dataset, save_dataset
from .estimators import LGDAAdapter, SourceSegmenter
from .global_denoise import build_mask, compute_prototypes, fuse_pseudolabel, update_prototypes_online
from .local_denoise import LocalCorrectionConfig, PseudoLabelCache, build_pseudolabel_cache, local_correct_image
from .metrics import asd, binarize, dice
from .sample_division import DivisionConfig, divide, image_entropy
from .segmodel import ReferenceSegNet, mc_dropout_predict, pretrained_reference_backbone
from .trainer import TrainConfig, adapt, evaluate, pretrain_source

__version__ = "0.1.0"

__all__ = [
    "ImageSample", "SynthConfig", "SynthShift", "generate_synthetic", "load_dataset", "save_dataset",
    "LGDAAdapter", "SourceSegmenter",
    "build_mask", "compute_prototypes", "fuse_pseudolabel", "update_prototypes_online",
    "LocalCorrectionConfig", "PseudoLabelCache", "build_pseudolabel_cache", "local_correct_image",
    "asd", "binarize", "dice",
    "DivisionConfig", "divide", "image_entropy",
    "ReferenceSegNet", "mc_dropout_predict", "pretrained_reference_backbone",
    "TrainConfig", "adapt", "evaluate", "pretrain_source",
]
