"""Pixel- and object-level segmentation metrics, plus classifier accuracy.

Empty-class convention: a class whose IoU/Dice denominator is zero is absent
from both prediction and ground truth, and scores 1.0. This matters for
polyp-free frames when metrics are macro-averaged over images.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .components import label_components
from .validation import check_same_shape

POLYP = 1
BACKGROUND = 0


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class pixel tallies; index ``c`` of each array belongs to class ``c``."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes=2):
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def num_classes(self):
        return len(self.tp)

    @property
    def total(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other):
        if self.num_classes != other.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    merge = __add__

    def swapped(self):
        """Counts with prediction and ground truth exchanged."""
        return ConfusionCounts(self.tp, self.fn, self.fp, self.tn)


def pixel_confusion(pred, gt, num_classes=2):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    check_same_shape(pred, gt)
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} values must lie in [0, {num_classes})")
    cm = np.bincount(gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel(),
                     minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def merge_counts(counts):
    counts = list(counts)
    if not counts:
        return ConfusionCounts.zeros()
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    return total


def class_iou(counts, c):
    denom = counts.tp[c] + counts.fp[c] + counts.fn[c]
    if denom == 0:
        return 1.0
    return float(counts.tp[c] / denom)


def mean_iou(counts):
    return float(np.mean([class_iou(counts, c) for c in range(counts.num_classes)]))


def class_dice(counts, c):
    denom = 2 * counts.tp[c] + counts.fp[c] + counts.fn[c]
    if denom == 0:
        return 1.0
    return float(2 * counts.tp[c] / denom)


def mean_dice(counts):
    return float(np.mean([class_dice(counts, c) for c in range(counts.num_classes)]))


def pixel_accuracy(counts):
    total = counts.total
    if total == 0:
        return 1.0
    return float(counts.tp.sum() / total)


def _binary_tallies(preds, labels):
    preds = np.asarray(preds).astype(bool).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("need at least one prediction")
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    tn = int(np.sum(~preds & ~labels))
    return tp, fp, fn, tn


def classification_accuracy(preds, labels):
    """(TP + TN) / all for binary decisions."""
    tp, fp, fn, tn = _binary_tallies(preds, labels)
    return (tp + tn) / (tp + fp + fn + tn)


def paper_precision(preds, labels):
    """TP / (TP + FP): precision, for reports that quote it under the name 'accuracy'.

    Defined as 0.0 when nothing is predicted positive.
    """
    tp, fp, _, _ = _binary_tallies(preds, labels)
    return tp / (tp + fp) if tp + fp else 0.0


# -- object level ------------------------------------------------------------

@dataclass(frozen=True)
class ObjectCounts:
    tp: int
    fp: int
    fn: int
    rule: str = "any_overlap"

    def __add__(self, other):
        if self.rule != other.rule:
            raise ValueError("cannot merge object counts made with different rules")
        return ObjectCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.rule)


def _overlap_table(pred_labels, n_pred, gt_labels, n_gt):
    """inter[i, j] = shared pixels of pred component i+1 and gt component j+1."""
    both = (pred_labels > 0) & (gt_labels > 0)
    idx = (pred_labels[both].astype(np.int64) - 1) * n_gt + (gt_labels[both].astype(np.int64) - 1)
    return np.bincount(idx, minlength=n_pred * n_gt).reshape(n_pred, n_gt)


def object_counts(pred_map, gt_map, rule="any_overlap", tau=0.5):
    """Component-level TP/FP/FN between binary maps (8-connected components).

    ``any_overlap``: a predicted component is a TP if it shares at least one
    pixel with some ground-truth component. ``iou``: the shared IoU must be at
    least ``tau``. One ground-truth component may validate several
    predictions; it is a FN only if no prediction matches it.
    """
    check_same_shape(pred_map, gt_map)
    if rule not in ("any_overlap", "iou"):
        raise ValueError(f"unknown matching rule {rule!r}")
    pred_labels, n_pred = label_components(pred_map)
    gt_labels, n_gt = label_components(gt_map)
    tag = rule if rule == "any_overlap" else f"iou>={tau:g}"
    if n_pred == 0 or n_gt == 0:
        return ObjectCounts(0, n_pred, n_gt, tag)
    inter = _overlap_table(pred_labels, n_pred, gt_labels, n_gt)
    if rule == "any_overlap":
        match = inter > 0
    else:
        pa = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)[1:]
        ga = np.bincount(gt_labels.ravel(), minlength=n_gt + 1)[1:]
        union = pa[:, None] + ga[None, :] - inter
        match = inter >= tau * union
        match &= inter > 0
    tp = int(match.any(axis=1).sum())
    fn = int((~match.any(axis=0)).sum())
    return ObjectCounts(tp, n_pred - tp, fn, tag)


# -- reports -----------------------------------------------------------------

METRIC_COLUMNS = ("iou_polyp", "dice_polyp", "iou_bg", "mean_iou", "pixel_acc")


def scores(counts):
    return {
        "iou_polyp": class_iou(counts, POLYP),
        "dice_polyp": class_dice(counts, POLYP),
        "iou_bg": class_iou(counts, BACKGROUND),
        "mean_iou": mean_iou(counts),
        "pixel_acc": pixel_accuracy(counts),
    }


@dataclass
class EvaluationReport:
    """Per-image scores plus micro (merged counts) and macro (mean of rows) summaries."""
    rows: list = field(default_factory=list)
    counts: ConfusionCounts = field(default_factory=ConfusionCounts.zeros)
    objects: ObjectCounts = None

    def add(self, image_id, pred, gt, rule="any_overlap", tau=0.5):
        c = pixel_confusion(pred, gt)
        self.counts = self.counts + c
        self.rows.append({"image_id": image_id, **scores(c)})
        obj = object_counts(pred, gt, rule, tau)
        self.objects = obj if self.objects is None else self.objects + obj
        return c

    @property
    def micro(self):
        return scores(self.counts)

    @property
    def macro(self):
        if not self.rows:
            return {k: float("nan") for k in METRIC_COLUMNS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_COLUMNS}

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("image_id",) + METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(_fmt(r))
            w.writerow(_fmt({"image_id": "__micro__", **self.micro}))
            w.writerow(_fmt({"image_id": "__macro__", **self.macro}))
        return path


def _fmt(row):
    return {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}


def write_objects_csv(path, entries):
    """``entries`` maps a model tag (e.g. ``S3``, ``S3+C2``) to its ObjectCounts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_tag", "TP", "FP", "FN", "rule"])
        for tag, oc in entries.items():
            w.writerow([tag, oc.tp, oc.fp, oc.fn, oc.rule])
    return path
