"""8-connected component labelling used by patch generation, refinement and metrics."""

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def label_components(mask):
    """Label the 8-connected foreground components of a binary mask.

    Returns ``(labels, n)`` where ``labels`` is an int32 array with 0 for
    background and 1..n for components, numbered in raster order of each
    component's first pixel.
    """
    mask = np.asarray(mask) > 0
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    return labels.astype(np.int32, copy=False), int(n)


def component_bboxes(labels, n):
    """Tight (row_min, col_min, row_max, col_max) boxes, exclusive upper bounds."""
    boxes = []
    for sl in ndimage.find_objects(labels, max_label=n):
        rs, cs = sl
        boxes.append((rs.start, cs.start, rs.stop, cs.stop))
    return boxes
