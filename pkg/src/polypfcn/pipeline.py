"""Two-stage inference (segment, then refine), evaluation, overlays and timing."""

import time
from dataclasses import dataclass

import cv2
import numpy as np

from .datasets import letterbox
from .inference import classify_patches, segment_images
from .metrics import EvaluationReport
from .refinement import RefinementConfig, refine

PURPLE = np.array([160, 32, 240], dtype=np.float64)
AGREE = np.array([0, 200, 0], dtype=np.float64)
MISSED = np.array([255, 200, 0], dtype=np.float64)


@dataclass
class PolypPipeline:
    """FCN region proposals, optionally followed by classifier refinement."""
    segmenter: object
    classifier: object = None
    refinement: RefinementConfig = None

    def classify(self, patches):
        return classify_patches(self.classifier, patches)

    def segment(self, images):
        return segment_images(self.segmenter, images)

    def refine(self, mask, image):
        return refine(mask, image, self.classify, self.refinement or RefinementConfig())

    def predict(self, image):
        """Returns ``(raw_mask, refined_mask, region_report)``; refined is None without a classifier."""
        raw = self.segment([image])[0]
        if self.classifier is None:
            return raw, None, []
        refined, report = self.refine(raw, image)
        return raw, refined, report


def evaluate(samples, segment_fn, refine_fn=None, rule="any_overlap", tau=0.5):
    """Score ``segment_fn`` (and optionally its refinement) on a list of samples.

    ``segment_fn`` maps a list of images to a list of label maps of matching
    size; ``refine_fn(mask, image)`` returns ``(refined_mask, report)``.
    Returns ``(raw_report, refined_report, region_reports)``.
    """
    raw = EvaluationReport()
    refined = EvaluationReport() if refine_fn is not None else None
    regions = []
    preds = segment_fn([s.image for s in samples])
    for s, pred in zip(samples, preds):
        raw.add(s.id, pred, s.mask, rule, tau)
        if refine_fn is not None:
            rmask, rep = refine_fn(pred, s.image)
            refined.add(s.id, rmask, s.mask, rule, tau)
            regions.append((s.id, rep))
    return raw, refined, regions


def resize_samples(samples, input_size):
    """Letterbox images and ground truth to the model input size (``--eval-at input_size``)."""
    from .datasets import Sample
    out = []
    for s in samples:
        image, mask, _ = letterbox(s.image, input_size, s.mask)
        out.append(Sample(s.id, image, mask))
    return out


def render_overlay(image, pred, gt=None, alpha=0.5):
    """Blend the prediction in purple; with ground truth, colour agreement.

    With ``gt``: predicted-and-true pixels green, false positives purple,
    missed polyp pixels amber. Output has the input's size.
    """
    out = image.astype(np.float64).copy()
    pred = np.asarray(pred) > 0
    if gt is None:
        out[pred] = (1 - alpha) * out[pred] + alpha * PURPLE
    else:
        gt = np.asarray(gt) > 0
        for sel, colour in ((pred & gt, AGREE), (pred & ~gt, PURPLE), (~pred & gt, MISSED)):
            out[sel] = (1 - alpha) * out[sel] + alpha * colour
    outline = cv2.morphologyEx(pred.astype(np.uint8), cv2.MORPH_GRADIENT, np.ones((3, 3), np.uint8))
    out[outline > 0] = PURPLE
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def benchmark(pipeline, frames, warmup=3):
    """Per-frame latency of segmentation alone and segmentation plus refinement.

    Each frame is segmented once and then refined; the S-only time is the
    segmentation stage and the S+refine time adds the refinement stage of the
    same frame. Warm-up frames are excluded. Batch size is 1.
    """
    if len(frames) <= warmup:
        raise ValueError(f"need more than {warmup} frames, got {len(frames)}")
    seg_times, total_times = [], []
    for i, frame in enumerate(frames):
        t0 = time.perf_counter()
        mask = pipeline.segment([frame])[0]
        t1 = time.perf_counter()
        if pipeline.classifier is not None:
            pipeline.refine(mask, frame)
        t2 = time.perf_counter()
        if i >= warmup:
            seg_times.append(t1 - t0)
            total_times.append(t2 - t0)
    rows = [_latency_row("S", seg_times)]
    if pipeline.classifier is not None:
        rows.append(_latency_row("S+refine", total_times))
    return rows


def _latency_row(name, times):
    ms = np.asarray(times) * 1000.0
    return {"pipeline": name, "frames": int(ms.size), "mean_ms": float(ms.mean()),
            "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)),
            "fps": float(1000.0 / ms.mean())}
