"""Dataset loading, patch generation, paired augmentation and synthetic fixtures.

Images are H x W x 3 ``uint8`` RGB arrays and masks are H x W ``uint8`` arrays
holding 0 (background) or 1 (polyp).
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .components import component_bboxes, label_components
from .validation import as_size

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "val", "test")

# Reference split sizes of the public layouts; a mismatch only warns.
LAYOUT_SPLIT_SIZES = {
    "endoscene": (547, 183, 182),
    "kvasir": (800, 100, 100),
}


class DatasetError(ValueError):
    """Raised for malformed dataset layouts and unreadable files."""


class PatchLabel(str, Enum):
    POLYP = "polyp"
    BACKGROUND = "background"

    @property
    def target(self):
        return 1 if self is PatchLabel.POLYP else 0


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image must be HxWx3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape[:2]} and "
                             f"mask {self.mask.shape} differ in size")
        if self.mask.size == 0:
            raise ValueError(f"sample {self.id}: empty image")
        if self.mask.dtype != np.uint8 or self.mask.max() > 1:
            self.mask = binarize_mask(self.mask)


@dataclass
class Patch:
    image: np.ndarray
    label: PatchLabel
    source_bbox: tuple
    source_id: str

    def __post_init__(self):
        self.label = PatchLabel(self.label)
        r0, c0, r1, c1 = self.source_bbox
        if r1 <= r0 or c1 <= c0:
            raise ValueError(f"degenerate patch bbox {self.source_bbox}")
        if self.image.shape[:2] != (r1 - r0, c1 - c0):
            raise ValueError(f"patch image {self.image.shape[:2]} does not match bbox {self.source_bbox}")


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for name in SPLITS:
            for s in getattr(self, name):
                if s.id in seen:
                    raise DatasetError(f"sample id {s.id!r} appears in both "
                                       f"{seen[s.id]} and {name}")
                seen[s.id] = name

    def sizes(self):
        return tuple(len(getattr(self, name)) for name in SPLITS)

    def __getitem__(self, name):
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 0.8
    scale_max: float = 1.25
    rotation_max_deg: float = 180.0
    hflip: bool = True
    vflip: bool = True
    shift_frac: float = 0.1
    pad_value: int = 0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")
        if not 0 <= self.rotation_max_deg <= 180:
            raise ValueError(f"rotation_max_deg must be in [0, 180], got {self.rotation_max_deg}")
        if not 0 <= self.shift_frac < 1:
            raise ValueError(f"shift_frac must be in [0, 1), got {self.shift_frac}")

    @classmethod
    def identity(cls):
        return cls(scale_min=1.0, scale_max=1.0, rotation_max_deg=0.0,
                   hflip=False, vflip=False, shift_frac=0.0)


def as_rng(rng):
    """Accept a seed or an existing ``numpy.random.Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def binarize_mask(mask):
    """Map any nonzero value to 1 (handles 0/255 encodings and RGB masks)."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask.max(axis=2)
    return (mask > 0).astype(np.uint8)


# -- file IO -----------------------------------------------------------------

def read_image(path):
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise DatasetError(f"cannot read image file {path}")
    return cv2.cvtColor(data, cv2.COLOR_BGR2RGB)


def read_mask(path):
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DatasetError(f"cannot read mask file {path}")
    return binarize_mask(data)


def write_image(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def write_mask(path, mask):
    """Write a binary mask as a single-channel image with values {0, 255}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), (np.asarray(mask) > 0).astype(np.uint8) * 255):
        raise OSError(f"failed to write {path}")


def _index_by_stem(directory):
    files = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in files:
                raise DatasetError(f"duplicate stem {p.stem!r} in {directory}")
            files[p.stem] = p
    return files


def _load_pairs(image_dir, mask_dir, stems, max_side):
    images = _index_by_stem(image_dir)
    masks = _index_by_stem(mask_dir)
    samples = []
    for stem in stems:
        if stem not in images:
            raise DatasetError(f"no image found for stem {stem!r} in {image_dir}")
        if stem not in masks:
            raise DatasetError(f"missing mask for image {stem!r} in {mask_dir}")
        image = read_image(images[stem])
        mask = read_mask(masks[stem])
        if image.shape[:2] != mask.shape:
            raise DatasetError(f"image and mask sizes differ for {stem!r}: "
                               f"{image.shape[:2]} vs {mask.shape}")
        if max_side and max(mask.shape) > max_side:
            image, mask = _shrink(image, mask, max_side)
        samples.append(Sample(stem, image, mask))
    return samples


def _shrink(image, mask, max_side):
    h, w = mask.shape
    f = max_side / max(h, w)
    size = (max(1, round(w * f)), max(1, round(h * f)))
    return (cv2.resize(image, size, interpolation=cv2.INTER_AREA),
            cv2.resize(mask, size, interpolation=cv2.INTER_NEAREST))


def load_dataset(root, layout="generic", max_side=None):
    """Load a dataset directory into a :class:`DatasetSplit`.

    ``generic`` expects ``root/{train,val,test}/{images,masks}/<stem>.<ext>``.
    ``endoscene`` and ``kvasir`` expect ``root/images``, ``root/masks`` and a
    ``root/splits.csv`` manifest with columns ``stem,split``. Masks are
    binarized (nonzero -> 1). ``max_side`` optionally downsizes large frames
    at load time, keeping the aspect ratio.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    split = {}
    if layout == "generic":
        for name in SPLITS:
            d = root / name
            if not (d / "images").is_dir() or not (d / "masks").is_dir():
                raise DatasetError(f"generic layout needs {d}/images and {d}/masks")
            stems = list(_index_by_stem(d / "images"))
            split[name] = _load_pairs(d / "images", d / "masks", stems, max_side)
    elif layout in LAYOUT_SPLIT_SIZES:
        manifest = root / "splits.csv"
        if not manifest.is_file():
            raise DatasetError(f"{layout} layout needs a split manifest at {manifest}")
        stems = {name: [] for name in SPLITS}
        with open(manifest, newline="") as fh:
            reader = csv.DictReader(fh)
            if not {"stem", "split"} <= set(reader.fieldnames or ()):
                raise DatasetError(f"{manifest} must have columns stem,split")
            for row in reader:
                if row["split"] not in stems:
                    raise DatasetError(f"unknown split {row['split']!r} for stem {row['stem']!r}")
                stems[row["split"]].append(row["stem"])
        for name in SPLITS:
            split[name] = _load_pairs(root / "images", root / "masks", stems[name], max_side)
    else:
        raise DatasetError(f"unknown layout {layout!r}; expected generic, endoscene or kvasir")
    for name in SPLITS:
        if not split[name]:
            raise DatasetError(f"split {name!r} under {root} is empty")
    result = DatasetSplit(**split)
    expected = LAYOUT_SPLIT_SIZES.get(layout)
    if expected and result.sizes() != expected:
        warnings.warn(f"{layout} split sizes {result.sizes()} differ from the "
                      f"standard {expected}", stacklevel=2)
    return result


def write_generic_layout(split, root):
    """Write a split to disk in the generic layout; masks stored as {0, 255}."""
    root = Path(root)
    for name in SPLITS:
        for s in split[name]:
            write_image(root / name / "images" / f"{s.id}.png", s.image)
            write_mask(root / name / "masks" / f"{s.id}.png", s.mask)
    return root


# -- patches -----------------------------------------------------------------

def generate_polyp_patches(sample):
    """One polyp patch per 8-connected mask component, cropped by its tight bbox."""
    labels, n = label_components(sample.mask)
    patches = []
    for r0, c0, r1, c1 in component_bboxes(labels, n):
        patches.append(Patch(sample.image[r0:r1, c0:c1].copy(), PatchLabel.POLYP,
                             (r0, c0, r1, c1), sample.id))
    return patches


def generate_background_patches(sample, count, size_range=None, rng=None, max_attempts=None):
    """Random square crops that contain no polyp pixel.

    Side lengths are uniform over ``size_range`` (default 32 px to half the
    short side). Rejection sampling stops after ``max_attempts`` (default
    ``100 * count``) draws and warns about any shortfall.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    h, w = sample.mask.shape
    short = min(h, w)
    if size_range is None:
        hi = max(1, short // 2)
        size_range = (min(32, hi), hi)
    lo, hi = size_range
    if not 1 <= lo <= hi <= short:
        raise ValueError(f"size_range {size_range} must satisfy 1 <= min <= max <= {short}")
    if count == 0:
        return []
    if sample.mask.all():
        warnings.warn(f"sample {sample.id}: mask covers the whole image, no background patch possible",
                      stacklevel=2)
        return []
    rng = as_rng(rng)
    max_attempts = 100 * count if max_attempts is None else max_attempts
    # summed-area table makes each rejection test O(1)
    sat = np.pad(sample.mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    patches = []
    attempts = 0
    while len(patches) < count and attempts < max_attempts:
        attempts += 1
        side = int(rng.integers(lo, hi + 1))
        r0 = int(rng.integers(0, h - side + 1))
        c0 = int(rng.integers(0, w - side + 1))
        r1, c1 = r0 + side, c0 + side
        if sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]:
            continue
        patches.append(Patch(sample.image[r0:r1, c0:c1].copy(), PatchLabel.BACKGROUND,
                             (r0, c0, r1, c1), sample.id))
    if len(patches) < count:
        warnings.warn(f"sample {sample.id}: only {len(patches)} of {count} background patches "
                      f"found in {max_attempts} attempts", stacklevel=2)
    return patches


def generate_patches(samples, background_per_image=2, size_range=None, seed=0):
    """Polyp and background patches for a list of samples, seeded per sample index."""
    patches = []
    for i, s in enumerate(samples):
        patches.extend(generate_polyp_patches(s))
        rng = np.random.default_rng([seed, i])
        patches.extend(generate_background_patches(s, background_per_image, size_range, rng))
    return patches


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    hflip: bool = False
    vflip: bool = False


def draw_augment_params(cfg, rng, shape):
    """Draw one set of transform parameters; ``shape`` is (H, W)."""
    rng = as_rng(rng)
    h, w = shape[:2]
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    angle = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    shift_x = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac)) * w
    shift_y = float(rng.uniform(-cfg.shift_frac, cfg.shift_frac)) * h
    hflip = bool(cfg.hflip and rng.random() < 0.5)
    vflip = bool(cfg.vflip and rng.random() < 0.5)
    return AugmentParams(scale, angle, shift_x, shift_y, hflip, vflip)


def augment_matrix(params, shape):
    """3x3 forward map (x, y, 1) source -> destination; scale, rotate, shift, flip."""
    h, w = shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(params.angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    s = params.scale
    m = np.array([[s * cos, -s * sin, 0.0],
                  [s * sin, s * cos, 0.0],
                  [0.0, 0.0, 1.0]])
    m[:2, 2] = [cx + params.shift_x - (m[0, 0] * cx + m[0, 1] * cy),
                cy + params.shift_y - (m[1, 0] * cx + m[1, 1] * cy)]
    if params.hflip:
        m = np.array([[-1.0, 0, w - 1], [0, 1, 0], [0, 0, 1]]) @ m
    if params.vflip:
        m = np.array([[1.0, 0, 0], [0, -1, h - 1], [0, 0, 1]]) @ m
    return m


def warp_pair(image, mask, matrix, pad_value=0):
    """Apply one forward affine map to an image (bilinear) and mask (nearest).

    Both outputs sample the same source coordinates, so every foreground
    output mask pixel is the nearest neighbour of a bilinear image tap.
    """
    h, w = image.shape[:2]
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    coords = np.stack([src_y, src_x])
    out_image = np.empty_like(image)
    for ch in range(image.shape[2]):
        plane = ndimage.map_coordinates(image[..., ch].astype(np.float64), coords, order=1,
                                        mode="grid-constant", cval=float(pad_value))
        out_image[..., ch] = np.clip(np.rint(plane), 0, 255).astype(image.dtype)
    if mask is None:
        return out_image, None
    out_mask = np.zeros_like(mask)
    ny = np.floor(src_y + 0.5).astype(np.int64)
    nx = np.floor(src_x + 0.5).astype(np.int64)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    out_mask[inside] = mask[ny[inside], nx[inside]]
    return out_image, out_mask


def augment(sample, cfg, rng):
    """Paired random geometric augmentation; output keeps the input size."""
    params = draw_augment_params(cfg, rng, sample.mask.shape)
    matrix = augment_matrix(params, sample.mask.shape)
    if np.allclose(matrix, np.eye(3), atol=0, rtol=0):
        return Sample(sample.id, sample.image.copy(), sample.mask.copy())
    image, mask = warp_pair(sample.image, sample.mask, matrix, cfg.pad_value)
    return Sample(sample.id, image, mask)


def augment_image(image, cfg, rng):
    """Augment an image on its own (used for classifier patches)."""
    mask = np.zeros(image.shape[:2], np.uint8)
    return augment(Sample("patch", image, mask), cfg, rng).image


# -- letterboxing ------------------------------------------------------------

@dataclass(frozen=True)
class Letterbox:
    """Geometry of an aspect-preserving resize followed by centred zero padding."""
    orig_shape: tuple
    new_shape: tuple
    pad_top: int
    pad_left: int
    target: tuple


def letterbox_geometry(shape, target):
    h, w = shape[:2]
    th, tw = as_size(target)
    f = min(th / h, tw / w)
    nh, nw = max(1, min(th, round(h * f))), max(1, min(tw, round(w * f)))
    return Letterbox((h, w), (nh, nw), (th - nh) // 2, (tw - nw) // 2, (th, tw))


def letterbox(image, target, mask=None, pad_value=0):
    """Resize keeping aspect ratio, then zero-pad to ``target``; returns (image, mask, geometry)."""
    geo = letterbox_geometry(image.shape, target)
    th, tw = geo.target
    nh, nw = geo.new_shape
    if (nh, nw) != image.shape[:2]:
        image = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
        if mask is not None:
            mask = cv2.resize(mask, (nw, nh), interpolation=cv2.INTER_NEAREST)
    out = np.full((th, tw) + image.shape[2:], pad_value, dtype=image.dtype)
    out[geo.pad_top:geo.pad_top + nh, geo.pad_left:geo.pad_left + nw] = image
    out_mask = None
    if mask is not None:
        out_mask = np.zeros((th, tw), dtype=mask.dtype)
        out_mask[geo.pad_top:geo.pad_top + nh, geo.pad_left:geo.pad_left + nw] = mask
    return out, out_mask, geo


def unletterbox_mask(mask, geo):
    """Undo :func:`letterbox` on a label map: crop padding, nearest-resize back."""
    nh, nw = geo.new_shape
    crop = np.ascontiguousarray(mask[geo.pad_top:geo.pad_top + nh, geo.pad_left:geo.pad_left + nw])
    if (nh, nw) != tuple(geo.orig_shape):
        crop = cv2.resize(crop.astype(np.uint8), (geo.orig_shape[1], geo.orig_shape[0]),
                          interpolation=cv2.INTER_NEAREST)
    return crop


# -- synthetic fixtures ------------------------------------------------------

def _smooth_noise(rng, shape, sigma, amplitude):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    noise /= noise.std() + 1e-12
    return noise * amplitude


def _ellipse(shape, cy, cx, ay, ax, angle):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = ys - cy, xs - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return u * u + v * v


def synth_sample(sample_id, image_size, rng, empty_prob=0.0):
    """One synthetic frame: textured tissue, 0-2 polyps, unlabeled distractors.

    A frame is polyp-free with probability ``empty_prob``; otherwise it holds
    one or two elliptical polyps.
    """
    h, w = as_size(image_size)
    short = min(h, w)
    base = np.array([185.0, 95.0, 85.0]) + rng.uniform(-15, 15, size=3)
    texture = _smooth_noise(rng, (h, w), sigma=short / 16, amplitude=14.0)
    img = base[None, None, :] + texture[..., None] * np.array([1.0, 0.7, 0.6])
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2
    img *= (1.0 - 0.25 * np.clip(r2, 0, 2))[..., None]

    mask = np.zeros((h, w), np.uint8)
    n_polyps = 0 if rng.random() < empty_prob else int(rng.choice([1, 2], p=[0.65, 0.35]))
    for _ in range(n_polyps):
        ay, ax = rng.uniform(0.08, 0.2, size=2) * short
        cy = rng.uniform(0.15, 0.85) * h
        cx = rng.uniform(0.15, 0.85) * w
        q = _ellipse((h, w), cy, cx, ay, ax, rng.uniform(0, math.pi))
        inside = q <= 1.0
        dome = np.sqrt(np.clip(1.0 - q, 0, 1))
        tint = np.array([50.0, 45.0, 10.0]) + rng.uniform(-8, 8, size=3)
        img += (inside * (0.55 + 0.45 * dome))[..., None] * tint
        mask[inside] = 1

    # pale blobs of polyp-like size but desaturated colour: plausible false positives
    for _ in range(int(rng.integers(0, 2))):
        ay, ax = rng.uniform(0.05, 0.12, size=2) * short
        q = _ellipse((h, w), rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w,
                     ay, ax, rng.uniform(0, math.pi))
        img += ((q <= 1.0) * np.sqrt(np.clip(1.0 - q, 0, 1)))[..., None] * np.array([10.0, 40.0, 55.0])
    # specular highlights
    for _ in range(int(rng.integers(1, 5))):
        rad = rng.uniform(0.015, 0.045) * short
        q = _ellipse((h, w), rng.uniform(0, h), rng.uniform(0, w), rad, rad * rng.uniform(0.5, 1.5),
                     rng.uniform(0, math.pi))
        glow = np.clip(1.5 - q, 0, 1)[..., None]
        img = img * (1 - glow) + 250.0 * glow

    img += rng.normal(0, 3.0, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(sample_id, image, mask)


def synth_dataset(n_train, n_val, n_test, image_size=(128, 128), rng=0, empty_prob=0.0):
    """Deterministic synthetic split of elliptical polyps over textured tissue."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 0:
        raise ValueError(f"split sizes must be >= 0, got {counts}")
    rng = as_rng(rng)
    out = {}
    for name in SPLITS:
        out[name] = [synth_sample(f"{name}_{i:04d}", image_size, rng, empty_prob) for i in range(counts[name])]
    return DatasetSplit(**out)
