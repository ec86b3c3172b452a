"""Atrous ResNet50 backbone, FCN segmenter, patch classifier and weight exchange.

Both task networks share one backbone topology with canonical parameter
names (``stem.conv``, ``stage{k}.block{i}.conv1`` ...), so backbone weights
can be extracted from one network and injected into the other. The default
schedule keeps stride 16: the last stage runs at stride 1 with dilation 2.
"""

import json
import logging
import warnings
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .validation import as_size, check_divisible

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FCN_SEGMENTER = "fcn_segmenter"
PATCH_CLASSIFIER = "patch_classifier"
NORM_BUFFERS = ("weight", "bias", "running_mean", "running_var")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightTransferError(ValueError):
    """Raised by strict injection when names or shapes do not line up."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Stride/dilation schedule of the ResNet50 backbone.

    ``base_width`` is the stem width (64 for ResNet50); every stage width
    scales with it. Smaller values keep the topology, names and stride
    schedule but shrink the channel counts for CPU-scale experiments.
    """
    stage_strides: tuple = (1, 2, 2, 1)
    stage_dilations: tuple = (1, 1, 1, 2)
    block_counts: tuple = (3, 4, 6, 3)
    base_width: int = 64
    stem_stride: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        object.__setattr__(self, "stage_dilations", tuple(int(d) for d in self.stage_dilations))
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        if self.block_counts != (3, 4, 6, 3):
            raise ValueError(f"block_counts must be ResNet50's (3, 4, 6, 3), got {self.block_counts}")
        if len(self.stage_strides) != 4 or len(self.stage_dilations) != 4:
            raise ValueError("stage_strides and stage_dilations need one entry per stage")
        if min(self.stage_dilations) < 1 or min(self.stage_strides) < 1:
            raise ValueError("strides and dilations must be >= 1")
        if self.stem_stride != 4:
            raise ValueError("the ResNet stem (stride-2 conv + stride-2 pool) has stride 4")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    @property
    def output_stride(self):
        return self.stem_stride * int(np.prod(self.stage_strides))

    @classmethod
    def output_stride_8(cls, **kw):
        """DeepLab-style variant with dilation in the last two stages."""
        return cls(stage_strides=(1, 2, 1, 1), stage_dilations=(1, 1, 2, 4), **kw)

    @property
    def out_channels(self):
        return self.base_width * 32

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    num_classes: int = 2
    input_size: tuple = (320, 320)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        object.__setattr__(self, "input_size", as_size(self.input_size))
        if self.kind not in (FCN_SEGMENTER, PATCH_CLASSIFIER):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes != 2:
            raise ValueError("both tasks are binary: num_classes must be 2")
        check_divisible(self.input_size, self.backbone.output_stride)


# -- layers ------------------------------------------------------------------

class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride=1, dilation=1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.norm1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.norm2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.norm3 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
            self.proj_norm = nn.BatchNorm2d(out_ch)
        else:
            self.proj = None

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        shortcut = x if self.proj is None else self.proj_norm(self.proj(x))
        return F.relu(out + shortcut)


class Stem(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv = nn.Conv2d(3, width, 7, stride=2, padding=3, bias=False)
        self.norm = nn.BatchNorm2d(width)

    def forward(self, x):
        return F.max_pool2d(F.relu(self.norm(self.conv(x))), 3, stride=2, padding=1)


class Backbone(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        w = self.cfg.base_width
        self.stem = Stem(w)
        in_ch = w
        for k, (n, stride, dil) in enumerate(zip(self.cfg.block_counts, self.cfg.stage_strides,
                                                 self.cfg.stage_dilations), start=1):
            width = w * 2 ** (k - 1)
            blocks = OrderedDict()
            for i in range(1, n + 1):
                blocks[f"block{i}"] = Bottleneck(in_ch, width, stride if i == 1 else 1, dil)
                in_ch = width * Bottleneck.expansion
            self.add_module(f"stage{k}", nn.Sequential(blocks))
        self.out_channels = in_ch

    def forward(self, x):
        os_ = self.cfg.output_stride
        if x.shape[-2] % os_ or x.shape[-1] % os_:
            raise ValueError(f"input {x.shape[-2]}x{x.shape[-1]} must be divisible by {os_} "
                             f"(the backbone output stride)")
        x = self.stem(x)
        for k in range(1, 5):
            x = getattr(self, f"stage{k}")(x)
        return x


class FCNSegmenter(nn.Module):
    """Backbone -> 1x1 score conv -> bilinear upsampling to the input size."""
    kind = FCN_SEGMENTER

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec.backbone)
        self.score = nn.Conv2d(self.backbone.out_channels, spec.num_classes, 1)

    def forward(self, x):
        logits = self.score(self.backbone(x))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


class PatchClassifierNet(nn.Module):
    """Backbone -> global average pooling -> one polyp logit."""
    kind = PATCH_CLASSIFIER

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec.backbone)
        self.fc = nn.Linear(self.backbone.out_channels, 1)

    def forward(self, x):
        feats = self.backbone(x).mean(dim=(2, 3))
        return self.fc(feats).squeeze(1)

    def predict_proba(self, x):
        return torch.sigmoid(self(x))


def build_backbone(cfg=None):
    return Backbone(cfg)


def build_fcn(spec):
    if spec.kind != FCN_SEGMENTER:
        raise ValueError(f"build_fcn needs kind {FCN_SEGMENTER!r}, got {spec.kind!r}")
    return FCNSegmenter(spec)


def build_classifier(spec):
    if spec.kind != PATCH_CLASSIFIER:
        raise ValueError(f"build_classifier needs kind {PATCH_CLASSIFIER!r}, got {spec.kind!r}")
    return PatchClassifierNet(spec)


def build_model(spec):
    return build_fcn(spec) if spec.kind == FCN_SEGMENTER else build_classifier(spec)


def preprocess(images, device=None):
    """uint8 N x H x W x 3 (or a single H x W x 3) -> normalized float NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr)).to(device=device, dtype=torch.float32)
    x = x.permute(0, 3, 1, 2) / 255.0
    mean = torch.tensor(IMAGENET_MEAN, device=x.device).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, device=x.device).view(1, 3, 1, 1)
    return (x - mean) / std


# -- named weights -----------------------------------------------------------

class NamedWeights(Mapping):
    """Immutable ordered map from parameter names to float32 arrays."""

    def __init__(self, entries=()):
        items = OrderedDict()
        for name, value in (entries.items() if isinstance(entries, Mapping) else entries):
            if name in items:
                raise ValueError(f"duplicate weight name {name!r}")
            arr = np.array(value, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"weight {name!r} contains non-finite values")
            arr.setflags(write=False)
            items[name] = arr
        self._items = items

    def __getitem__(self, name):
        return self._items[name]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def shapes(self):
        return OrderedDict((k, v.shape) for k, v in self._items.items())

    def layer_names(self):
        return list(OrderedDict.fromkeys(k.rsplit(".", 1)[0] for k in self._items))

    def equals(self, other):
        """Bit-exact comparison of names, shapes and values."""
        return (list(self) == list(other)
                and all(np.array_equal(self[k], other[k]) for k in self))

    def __repr__(self):
        return f"NamedWeights({len(self)} arrays, {sum(v.size for v in self.values())} values)"


def _state_items(module):
    """(name, tensor) pairs of trainable params and norm statistics, skipping counters."""
    for name, tensor in module.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, tensor


def canonical_layer_names(cfg=None):
    cfg = cfg or BackboneConfig()
    names = ["stem.conv", "stem.norm"]
    in_ch = cfg.base_width
    for k, n in enumerate(cfg.block_counts, start=1):
        out_ch = cfg.base_width * 2 ** (k - 1) * Bottleneck.expansion
        for i in range(1, n + 1):
            prefix = f"stage{k}.block{i}"
            names += [f"{prefix}.{p}" for p in ("conv1", "norm1", "conv2", "norm2", "conv3", "norm3")]
            stride = cfg.stage_strides[k - 1] if i == 1 else 1
            if stride != 1 or in_ch != out_ch:
                names += [f"{prefix}.proj", f"{prefix}.proj_norm"]
            in_ch = out_ch
    return names


def canonical_backbone_names(cfg=None):
    """Full parameter names (layer + tensor suffix) of the backbone."""
    keys = []
    for layer in canonical_layer_names(cfg):
        if layer.rsplit(".", 1)[1].startswith(("norm", "proj_norm")):
            keys += [f"{layer}.{b}" for b in NORM_BUFFERS]
        else:
            keys.append(f"{layer}.weight")
    return keys


def extract_weights(model):
    """Every parameter and norm statistic of a model, under its module path."""
    return NamedWeights((k, v.detach().cpu().numpy()) for k, v in _state_items(model))


def extract_backbone_weights(model):
    backbone = model.backbone if hasattr(model, "backbone") else model
    return NamedWeights((k, v.detach().cpu().numpy()) for k, v in _state_items(backbone))


def _inject(module, weights, strict, what):
    own = OrderedDict(_state_items(module))
    missing = [k for k in own if k not in weights]
    unexpected = [k for k in weights if k not in own]
    mismatched = [k for k in own if k in weights and tuple(weights[k].shape) != tuple(own[k].shape)]
    if strict and (missing or unexpected or mismatched):
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if unexpected:
            parts.append(f"unexpected {unexpected}")
        if mismatched:
            parts.append("shape mismatch " + ", ".join(
                f"{k}: {tuple(weights[k].shape)} vs {tuple(own[k].shape)}" for k in mismatched))
        raise WeightTransferError(f"cannot inject {what} weights: " + "; ".join(parts))
    if not strict:
        for k in unexpected:
            warnings.warn(f"skipping unexpected weight {k!r}", stacklevel=3)
        for k in mismatched:
            warnings.warn(f"skipping {k!r}: shape {tuple(weights[k].shape)} vs "
                          f"{tuple(own[k].shape)}", stacklevel=3)
    with torch.no_grad():
        for k, tensor in own.items():
            if k in weights and k not in mismatched:
                tensor.copy_(torch.from_numpy(np.array(weights[k])))
    return module


def inject_backbone_weights(model, weights, strict=True):
    """Overwrite the backbone in place from ``weights``; heads are left untouched."""
    backbone = model.backbone if hasattr(model, "backbone") else model
    _inject(backbone, weights, strict, "backbone")
    return model


def inject_weights(model, weights, strict=True):
    _inject(model, weights, strict, "model")
    return model


def random_init(model, seed):
    """Deterministically redraw every parameter.

    Backbone convs get He fan-in weights; the last norm of each residual branch starts at
    zero scale so a fresh network is close to identity per block. Heads (the layers outside
    ``backbone``) get N(0, 0.01) weights so initial outputs sit near zero.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in model.named_modules():
            head = not name.startswith("backbone") and not isinstance(model, Backbone)
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                if head:
                    nn.init.normal_(m.weight, 0.0, 0.01, generator=gen)
                else:
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
                m.weight.fill_(0.0 if name.endswith("norm3") else 1.0)
                m.bias.zero_()
    return model


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    weights: NamedWeights
    meta: dict

    @property
    def kind(self):
        return self.meta.get("model_kind")

    def spec(self):
        bb = self.meta.get("backbone") or {}
        return ModelSpec(self.meta["model_kind"], input_size=tuple(self.meta["input_size"]),
                         backbone=BackboneConfig(**bb))

    def backbone_weights(self):
        return NamedWeights((k[len("backbone."):], v) for k, v in self.weights.items()
                            if k.startswith("backbone."))


def make_checkpoint(model, **extra):
    meta = {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "input_size": list(model.spec.input_size),
        "backbone": model.spec.backbone.to_dict(),
        "created_by": "polypfcn",
    }
    meta.update(extra)
    return Checkpoint(extract_weights(model), meta)


def save_checkpoint(path, checkpoint):
    """Write an ``.npz`` archive: little-endian float32 arrays plus a JSON metadata record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v, dtype="<f4") for k, v in checkpoint.weights.items()}
    if "__meta__" in arrays:
        raise CheckpointError("'__meta__' is reserved")
    meta = dict(checkpoint.meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    meta["names"] = list(arrays)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            names = meta.pop("names", [k for k in data.files if k != "__meta__"])
            weights = NamedWeights((k, data[k]) for k in names)
    except (OSError, ValueError, KeyError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {meta.get('format_version')}")
    return Checkpoint(weights, meta)


def model_from_checkpoint(checkpoint):
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = build_model(checkpoint.spec())
    inject_weights(model, checkpoint.weights, strict=True)
    return model.eval()


def load_pretrained_backbone(path, cfg=None):
    """Backbone weights from a checkpoint file, keeping only canonical names.

    Accepts bare backbone archives and full-model checkpoints (``backbone.``
    prefix); anything else, such as a classification head, is dropped with a
    warning.
    """
    ckpt = load_checkpoint(path)
    canonical = canonical_backbone_names(cfg or _cfg_from_meta(ckpt.meta))
    wanted = set(canonical)
    kept = OrderedDict()
    for name, arr in ckpt.weights.items():
        bare = name[len("backbone."):] if name.startswith("backbone.") else name
        if bare in wanted:
            kept[bare] = arr
        else:
            warnings.warn(f"dropping non-backbone weight {name!r} from {path}", stacklevel=2)
    missing = [k for k in canonical if k not in kept]
    if missing:
        logger.warning("%s lacks %d backbone weights (first: %s)", path, len(missing), missing[0])
    return NamedWeights((k, kept[k]) for k in canonical if k in kept)


def _cfg_from_meta(meta):
    bb = meta.get("backbone")
    return BackboneConfig(**bb) if bb else BackboneConfig()


def save_backbone(path, weights, cfg=None, **extra):
    meta = {"format_version": FORMAT_VERSION, "model_kind": "backbone", "input_size": None,
            "backbone": (cfg or BackboneConfig()).to_dict(), "created_by": "polypfcn"}
    meta.update(extra)
    return save_checkpoint(path, Checkpoint(NamedWeights(weights), meta))


_TV_LAYERS = {"conv1": "conv1", "bn1": "norm1", "conv2": "conv2", "bn2": "norm2",
              "conv3": "conv3", "bn3": "norm3", "downsample.0": "proj", "downsample.1": "proj_norm"}


def convert_torchvision_resnet50(state_dict):
    """Rename a torchvision ``resnet50`` state dict to canonical backbone names.

    This is how ImageNet weights enter the pipeline: convert, then
    ``save_backbone`` to produce a pretrained file.
    """
    out = OrderedDict()
    for name, value in state_dict.items():
        if name.endswith("num_batches_tracked") or name.startswith("fc."):
            continue
        if name.startswith("conv1."):
            new = "stem.conv." + name.split(".", 1)[1]
        elif name.startswith("bn1."):
            new = "stem.norm." + name.split(".", 1)[1]
        elif name.startswith("layer"):
            layer, block, rest = name.split(".", 2)
            sub, suffix = rest.rsplit(".", 1)
            new = f"stage{layer[5:]}.block{int(block) + 1}.{_TV_LAYERS[sub]}.{suffix}"
        else:
            raise KeyError(f"unrecognised torchvision weight {name!r}")
        out[new] = value.detach().cpu().numpy() if hasattr(value, "detach") else value
    return NamedWeights(out)
