"""Input validation helpers shared by the estimators and the functional API."""

import numpy as np

OUTPUT_STRIDE = 16


def check_image(image, name="image"):
    """Return ``image`` as an H x W x 3 uint8 array or raise ``ValueError``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {image.shape}")
    if image.dtype != np.uint8:
        if np.issubdtype(image.dtype, np.floating) and not np.all(np.isfinite(image)):
            raise ValueError(f"{name} contains non-finite values")
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return image


def check_label_map(label_map, name="label_map", num_classes=2):
    label_map = np.asarray(label_map)
    if label_map.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {label_map.shape}")
    if label_map.size and (label_map.min() < 0 or label_map.max() >= num_classes):
        raise ValueError(f"{name} values must lie in [0, {num_classes}), "
                         f"got range [{label_map.min()}, {label_map.max()}]")
    return label_map.astype(np.int64, copy=False)


def check_same_shape(a, b, names=("pred", "gt")):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}")


def check_divisible(size, stride=OUTPUT_STRIDE, what="input size"):
    """Raise unless both spatial dimensions of ``size`` are multiples of ``stride``."""
    h, w = (size, size) if np.isscalar(size) else tuple(size)
    if h % stride or w % stride or h <= 0 or w <= 0:
        raise ValueError(f"{what} {h}x{w} must be positive and divisible by {stride} "
                         f"(the backbone output stride)")
    return int(h), int(w)


def as_size(size):
    """Normalize an int or (H, W) pair to an (H, W) tuple of ints."""
    if np.isscalar(size):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)
