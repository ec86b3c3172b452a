"""Batched inference helpers for the segmenter and the patch classifier."""

import numpy as np
import torch

from .datasets import letterbox, unletterbox_mask
from .models import preprocess


def _device_of(model):
    return next(model.parameters()).device


@torch.no_grad()
def segment_letterboxed(model, images, batch_size=8):
    """Argmax label maps for images already at the model input size."""
    model.eval()
    device = _device_of(model)
    out = []
    for i in range(0, len(images), batch_size):
        logits = model(preprocess(np.stack(images[i:i + batch_size]), device))
        out.extend(logits.argmax(1).to(torch.uint8).cpu().numpy())
    return out


def segment_images(model, images, input_size=None, batch_size=8):
    """Predict binary masks at each image's native resolution.

    Images are letterboxed to the model input size, segmented, and the
    predictions are un-padded and nearest-resized back.
    """
    input_size = input_size or model.spec.input_size
    boxed, geos = [], []
    for im in images:
        b, _, geo = letterbox(im, input_size)
        boxed.append(b)
        geos.append(geo)
    preds = segment_letterboxed(model, boxed, batch_size)
    return [unletterbox_mask(p, g) for p, g in zip(preds, geos)]


@torch.no_grad()
def classify_patches(model, patches, batch_size=32):
    """Polyp probabilities for a list of H x W x 3 patch images of any size."""
    if len(patches) == 0:
        return np.zeros(0, dtype=np.float64)
    model.eval()
    device = _device_of(model)
    size = model.spec.input_size
    boxed = [letterbox(p, size)[0] for p in patches]
    probs = []
    for i in range(0, len(boxed), batch_size):
        x = preprocess(np.stack(boxed[i:i + batch_size]), device)
        probs.append(torch.sigmoid(model(x)).double().cpu().numpy())
    return np.concatenate(probs)
