"""False-positive removal: classify each predicted region and delete non-polyp ones."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .components import component_bboxes, label_components
from .validation import check_image, check_label_map, check_same_shape


@dataclass(frozen=True)
class RefinementConfig:
    decision_threshold: float = 0.5
    bbox_margin_frac: float = 0.0
    min_area_px: int = 0

    def __post_init__(self):
        if not 0 < self.decision_threshold < 1:
            raise ValueError("decision_threshold must lie in (0, 1)")
        if self.bbox_margin_frac < 0:
            raise ValueError("bbox_margin_frac must be >= 0")
        if self.min_area_px < 0:
            raise ValueError("min_area_px must be >= 0")


@dataclass(frozen=True)
class Region:
    component_id: int
    rows: np.ndarray
    cols: np.ndarray
    bbox: tuple

    @property
    def area(self):
        return int(self.rows.size)

    @property
    def pixels(self):
        return set(zip(self.rows.tolist(), self.cols.tolist()))


@dataclass(frozen=True)
class RegionDecision:
    bbox: tuple
    area: int
    prob: float
    kept: bool

    def to_record(self, image_id=None):
        return {"image_id": image_id, "bbox": list(self.bbox), "area": self.area,
                "prob": None if self.prob is None else float(self.prob), "kept": self.kept}


def extract_regions(label_map):
    """8-connected foreground regions ordered by (row_min, col_min)."""
    label_map = check_label_map(label_map)
    labels, n = label_components(label_map)
    if n == 0:
        return []
    boxes = component_bboxes(labels, n)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(1, n + 2))
    width = label_map.shape[1]
    regions = []
    for k in range(n):
        idx = order[starts[k]:starts[k + 1]]
        regions.append(Region(k + 1, idx // width, idx % width, boxes[k]))
    regions.sort(key=lambda r: (r.bbox[0], r.bbox[1]))
    return regions


def expand_bbox(bbox, margin_frac, shape):
    """Grow a bbox by ``margin_frac`` of its height/width on every side, clipped to ``shape``."""
    r0, c0, r1, c1 = bbox
    dr = int(round((r1 - r0) * margin_frac))
    dc = int(round((c1 - c0) * margin_frac))
    h, w = shape[:2]
    return max(0, r0 - dr), max(0, c0 - dc), min(h, r1 + dr), min(w, c1 + dc)


def crop_region(image, region, margin_frac=0.0):
    bbox = region.bbox if isinstance(region, Region) else tuple(region)
    r0, c0, r1, c1 = expand_bbox(bbox, margin_frac, image.shape)
    return image[r0:r1, c0:c1]


def _as_prob_fn(classifier):
    if hasattr(classifier, "predict_proba"):
        def fn(patches):
            p = np.asarray(classifier.predict_proba(patches), dtype=np.float64)
            return p[:, 1] if p.ndim == 2 else p
        return fn
    return lambda patches: np.asarray(classifier(patches), dtype=np.float64)


def refine(label_map, image, classifier, cfg=None):
    """Delete predicted regions the classifier scores below the threshold.

    ``classifier`` is either an object with ``predict_proba`` (a
    :class:`~polypfcn.estimators.PatchClassifier`) or a callable mapping a
    list of patch images to polyp probabilities. All crops go through one
    batched call. Returns ``(refined_map, report)`` where ``report`` holds a
    :class:`RegionDecision` per region in region order.
    """
    cfg = cfg or RefinementConfig()
    label_map = check_label_map(label_map)
    image = check_image(image)
    check_same_shape(label_map, image[..., 0], ("label_map", "image"))
    regions = extract_regions(label_map)
    out = label_map.astype(np.uint8, copy=True)
    if not regions:
        return out, []
    scored = [r for r in regions if r.area >= cfg.min_area_px]
    probs = {}
    if scored:
        crops = [crop_region(image, r, cfg.bbox_margin_frac) for r in scored]
        values = _as_prob_fn(classifier)(crops)
        if len(values) != len(crops):
            raise ValueError(f"classifier returned {len(values)} scores for {len(crops)} regions")
        probs = {r.component_id: float(v) for r, v in zip(scored, values)}
    report = []
    for r in regions:
        prob = probs.get(r.component_id)
        keep = prob is not None and prob >= cfg.decision_threshold
        if not keep:
            out[r.rows, r.cols] = 0
        report.append(RegionDecision(r.bbox, r.area, prob, keep))
    return out, report


def write_report_jsonl(path, reports):
    """``reports`` is an iterable of (image_id, [RegionDecision, ...]) pairs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for image_id, decisions in reports:
            for d in decisions:
                fh.write(json.dumps(d.to_record(image_id)) + "\n")
    return path
