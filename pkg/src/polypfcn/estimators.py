"""scikit-learn compatible wrappers around the segmenter, classifier and refiner.

The estimators take plain lists of uint8 RGB images (and masks / labels),
so they drop into ``sklearn.model_selection`` utilities and pipelines.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import OptimizerSpec
from .datasets import AugmentConfig, DatasetSplit, Patch, PatchLabel, Sample
from .inference import classify_patches, segment_images
from .metrics import POLYP, class_iou, merge_counts, pixel_confusion
from .models import (FCN_SEGMENTER, PATCH_CLASSIFIER, BackboneConfig, ModelSpec, NamedWeights,
                     build_model, inject_backbone_weights, inject_weights, load_pretrained_backbone,
                     model_from_checkpoint, random_init)
from .refinement import RefinementConfig, refine
from .training import train_classifier, train_segmentation
from .validation import check_image, check_label_map


def _resolve_backbone(init_backbone, cfg):
    if init_backbone is None:
        return None
    if isinstance(init_backbone, NamedWeights):
        return init_backbone
    return load_pretrained_backbone(init_backbone, cfg)


class _TorchEstimator(BaseEstimator):
    kind = None

    def _spec(self):
        return ModelSpec(self.kind, input_size=self.input_size,
                         backbone=BackboneConfig(base_width=self.base_width))

    def _new_model(self):
        model = random_init(build_model(self._spec()), self.random_state)
        weights = _resolve_backbone(self.init_backbone, self._spec().backbone)
        if weights is not None:
            inject_backbone_weights(model, weights)
        return model

    def _optimizer(self):
        return OptimizerSpec(self.optimizer, self.lr, self.momentum, self.schedule,
                             self.epochs, self.batch_size)

    def _adopt(self, checkpoint, history):
        self.model_ = build_model(self._spec())
        inject_weights(self.model_, checkpoint.weights)
        self.model_.eval()
        self.checkpoint_ = checkpoint
        self.history_ = history
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint, **params):
        model = model_from_checkpoint(checkpoint)
        if model.kind != cls.kind:
            raise ValueError(f"checkpoint holds a {model.kind}, expected {cls.kind}")
        est = cls(input_size=model.spec.input_size,
                  base_width=model.spec.backbone.base_width, **params)
        est.model_ = model
        return est


class PolypSegmenter(_TorchEstimator):
    """Atrous FCN segmenter; ``predict`` returns masks at native resolution."""
    kind = FCN_SEGMENTER

    def __init__(self, input_size=320, base_width=64, optimizer="adam_amsgrad", lr=1e-4,
                 momentum=0.9, schedule="constant", epochs=500, batch_size=24, augment=None,
                 init_backbone=None, random_state=0):
        self.input_size = input_size
        self.base_width = base_width
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.augment = augment
        self.init_backbone = init_backbone
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        train = [Sample(f"train_{i}", check_image(im), check_label_map(m))
                 for i, (im, m) in enumerate(zip(X, y))]
        val = []
        if X_val is not None:
            val = [Sample(f"val_{i}", check_image(im), check_label_map(m))
                   for i, (im, m) in enumerate(zip(X_val, y_val))]
        aug = self.augment if self.augment is not None else AugmentConfig()
        model = self._new_model()
        ckpt, history = train_segmentation(model, DatasetSplit(train, val, []), self._optimizer(),
                                           aug, self.random_state)
        return self._adopt(ckpt, history)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return segment_images(self.model_, [check_image(im) for im in X])

    def score(self, X, y):
        """Micro-averaged polyp IoU."""
        preds = self.predict(X)
        return class_iou(merge_counts(pixel_confusion(p, check_label_map(g))
                                      for p, g in zip(preds, y)), POLYP)


class PatchClassifier(ClassifierMixin, _TorchEstimator):
    """Polyp / background patch classifier; label 1 means polyp."""
    kind = PATCH_CLASSIFIER

    def __init__(self, input_size=224, base_width=64, optimizer="sgd_momentum", lr=1e-3,
                 momentum=0.9, schedule="cosine_decay", epochs=250, batch_size=24, augment=None,
                 init_backbone=None, random_state=0):
        self.input_size = input_size
        self.base_width = base_width
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.augment = augment
        self.init_backbone = init_backbone
        self.random_state = random_state

    @staticmethod
    def _patches(X, y):
        out = []
        for im, label in zip(X, y):
            im = check_image(im)
            lab = PatchLabel.POLYP if int(label) == 1 else PatchLabel.BACKGROUND
            out.append(Patch(im, lab, (0, 0) + im.shape[:2], "array"))
        return out

    def fit(self, X, y, X_val=None, y_val=None):
        y = np.asarray(y).astype(int)
        if set(np.unique(y)) - {0, 1}:
            raise ValueError("labels must be 0 (background) or 1 (polyp)")
        val = self._patches(X_val, y_val) if X_val is not None else []
        model = self._new_model()
        ckpt, history = train_classifier(model, self._patches(X, y), val, self._optimizer(),
                                         self.random_state, self.augment)
        self.classes_ = np.array([0, 1])
        return self._adopt(ckpt, history)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = classify_patches(self.model_, [check_image(im) for im in X])
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    @classmethod
    def from_checkpoint(cls, checkpoint, **params):
        est = super().from_checkpoint(checkpoint, **params)
        est.classes_ = np.array([0, 1])
        return est


class RegionRefiner(TransformerMixin, BaseEstimator):
    """Removes predicted regions that ``classifier`` does not judge to be polyps.

    ``transform`` takes label maps and the matching images; the per-image
    region decisions of the last call are kept in ``reports_``.
    """

    def __init__(self, classifier=None, decision_threshold=0.5, bbox_margin_frac=0.0,
                 min_area_px=0):
        self.classifier = classifier
        self.decision_threshold = decision_threshold
        self.bbox_margin_frac = bbox_margin_frac
        self.min_area_px = min_area_px

    def fit(self, X=None, y=None):
        if self.classifier is None:
            raise ValueError("RegionRefiner needs a classifier")
        self.config_ = RefinementConfig(self.decision_threshold, self.bbox_margin_frac,
                                        self.min_area_px)
        return self

    def transform(self, label_maps, images):
        check_is_fitted(self, "config_")
        out, self.reports_ = [], []
        for lm, im in zip(label_maps, images):
            refined, report = refine(lm, im, self.classifier, self.config_)
            out.append(refined)
            self.reports_.append(report)
        return out
