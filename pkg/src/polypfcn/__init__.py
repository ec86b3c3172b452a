"""Polyp segmentation: atrous ResNet50 FCN proposals refined by a same-backbone patch classifier."""

from .config import ExperimentConfig, OptimizerSpec, load_config, save_config
from .datasets import (AugmentConfig, DatasetSplit, Patch, PatchLabel, Sample, augment,
                       generate_background_patches, generate_polyp_patches, load_dataset,
                       synth_dataset)
from .estimators import PatchClassifier, PolypSegmenter, RegionRefiner
from .metrics import (ConfusionCounts, ObjectCounts, class_dice, class_iou, classification_accuracy,
                      mean_iou, object_counts, paper_precision, pixel_accuracy, pixel_confusion)
from .models import (BackboneConfig, ModelSpec, NamedWeights, build_backbone, build_classifier,
                     build_fcn, extract_backbone_weights, inject_backbone_weights,
                     load_pretrained_backbone, random_init)
from .refinement import RefinementConfig, Region, crop_region, extract_regions, refine
from .training import bce_loss, ce_loss, lr_at, run_scheme, softmax, train_classifier, train_segmentation

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "OptimizerSpec",
    "load_config",
    "save_config",
    "AugmentConfig",
    "DatasetSplit",
    "Patch",
    "PatchLabel",
    "Sample",
    "augment",
    "generate_background_patches",
    "generate_polyp_patches",
    "load_dataset",
    "synth_dataset",
    "PatchClassifier",
    "PolypSegmenter",
    "RegionRefiner",
    "ConfusionCounts",
    "ObjectCounts",
    "class_dice",
    "class_iou",
    "classification_accuracy",
    "mean_iou",
    "object_counts",
    "paper_precision",
    "pixel_accuracy",
    "pixel_confusion",
    "BackboneConfig",
    "ModelSpec",
    "NamedWeights",
    "build_backbone",
    "build_classifier",
    "build_fcn",
    "extract_backbone_weights",
    "inject_backbone_weights",
    "load_pretrained_backbone",
    "random_init",
    "RefinementConfig",
    "Region",
    "crop_region",
    "extract_regions",
    "refine",
    "bce_loss",
    "ce_loss",
    "lr_at",
    "run_scheme",
    "softmax",
    "train_classifier",
    "train_segmentation",
]
