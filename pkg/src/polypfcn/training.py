"""Losses, schedules, single-network training loops and weight-circulation schemes.

Only backbone weights circulate between the segmenter (S stages) and the
patch classifier (C stages); task heads are freshly initialized at every
transfer, and each donor contributes its best-validation checkpoint.
"""

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, save_config
from .datasets import (AugmentConfig, PatchLabel, augment, augment_image, generate_patches,
                       letterbox, Sample)
from .inference import segment_letterboxed
from .metrics import POLYP, class_iou, classification_accuracy, merge_counts, pixel_confusion
from .models import (FCN_SEGMENTER, PATCH_CLASSIFIER, ModelSpec, build_model,
                     extract_backbone_weights, inject_backbone_weights, load_pretrained_backbone,
                     make_checkpoint, preprocess, random_init, save_checkpoint)

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingError(RuntimeError):
    pass


class SchemeError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


# -- losses ------------------------------------------------------------------

def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def bce_loss(probs, targets, eps=BCE_EPS):
    """Mean binary cross entropy over probabilities clamped to [eps, 1 - eps]."""
    probs = _as_tensor(probs)
    targets = _as_tensor(targets, probs.dtype)
    if probs.numel() == 0:
        raise ValueError("bce_loss needs a non-empty minibatch")
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(targets.shape)}")
    y = probs.clamp(eps, 1 - eps)
    return -(targets * torch.log(y) + (1 - targets) * torch.log(1 - y)).mean()


def log_softmax(logits, dim=-1):
    logits = _as_tensor(logits)
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def softmax(logits, dim=-1):
    logits = _as_tensor(logits)
    shifted = logits - logits.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def ce_loss(logits, targets, class_dim=1):
    """Sparse softmax cross entropy averaged over every scored pixel.

    ``logits`` is N x C x H x W (or N x C) and ``targets`` holds class indices
    with the class axis removed.
    """
    logits = _as_tensor(logits)
    targets = _as_tensor(targets, torch.int64)
    num_classes = logits.shape[class_dim]
    if targets.numel() == 0:
        raise ValueError("ce_loss needs at least one target")
    if int(targets.max()) >= num_classes or int(targets.min()) < 0:
        raise ValueError(f"target class index out of range for {num_classes} classes")
    logp = log_softmax(logits, dim=class_dim)
    picked = logp.gather(class_dim, targets.unsqueeze(class_dim)).squeeze(class_dim)
    return -picked.mean()


# -- schedule ----------------------------------------------------------------

def lr_at(spec, epoch):
    if not 0 <= epoch < spec.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {spec.epochs})")
    if spec.schedule == "constant":
        return spec.lr
    return spec.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / spec.epochs))


def make_optimizer(params, spec):
    if spec.kind == "sgd_momentum":
        return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum)
    return torch.optim.Adam(params, lr=spec.lr, amsgrad=True)


def set_deterministic(enabled=True, threads=1):
    """Single-threaded, deterministic kernels; required for byte-identical reruns."""
    if enabled:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(enabled, warn_only=True)


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- history -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float
    val_metric: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    metric_name: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def best_epoch(self):
        vals = self.column("val_metric")
        return int(np.argmax(vals)) if vals else -1

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_metric", "val_metric", "lr", "wall_time"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_metric), repr(r.val_metric),
                            repr(r.lr), f"{r.wall_time:.3f}"])
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_metric"]),
                                float(r["val_metric"]), float(r["lr"]), float(r["wall_time"]))
                    for r in rows])


# -- loops -------------------------------------------------------------------

def _check_finite(loss, epoch, batch):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch}")


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _device(model):
    return next(model.parameters()).device


def _boxed(samples, size):
    out = []
    for s in samples:
        image, mask, _ = letterbox(s.image, size, s.mask)
        out.append(Sample(s.id, image, mask))
    return out


def evaluate_segmenter(model, samples, batch_size=8):
    """Micro polyp IoU of ``model`` on samples already at its input size."""
    preds = segment_letterboxed(model, [s.image for s in samples], batch_size)
    counts = merge_counts(pixel_confusion(p, s.mask) for p, s in zip(preds, samples))
    return class_iou(counts, POLYP)


def train_segmentation(model, split, spec, aug=None, seed=0, out_dir=None, name="fcn"):
    """Minimize sparse CE on ``split.train``; select on validation polyp IoU.

    Returns ``(best_checkpoint, history)``; ``model`` is left holding the
    final-epoch weights. With ``out_dir`` both checkpoints and the history CSV
    are written there.
    """
    if model.kind != FCN_SEGMENTER:
        raise ValueError(f"train_segmentation needs an {FCN_SEGMENTER}, got {model.kind}")
    if not split.train:
        raise ValueError("training split is empty")
    aug = aug if aug is not None else AugmentConfig()
    size = model.spec.input_size
    train = _boxed(split.train, size)
    val = _boxed(split.val, size)
    device = _device(model)
    opt = make_optimizer(model.parameters(), spec)
    history = TrainHistory(metric_name="polyp_iou")
    best, best_val = None, -math.inf
    torch.manual_seed(seed)
    for epoch in range(spec.epochs):
        t0 = time.perf_counter()
        lr = lr_at(spec, epoch)
        _set_lr(opt, lr)
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train))
        losses, counts = [], []
        for b, start in enumerate(range(0, len(order), spec.batch_size)):
            batch = [augment(train[i], aug, np.random.default_rng([seed, epoch, int(i)]))
                     for i in order[start:start + spec.batch_size]]
            x = preprocess(np.stack([s.image for s in batch]), device)
            y = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.int64)).to(device)
            logits = model(x)
            loss = ce_loss(logits, y)
            _check_finite(loss, epoch, b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(batch))
            pred = logits.detach().argmax(1).cpu().numpy()
            counts.extend(pixel_confusion(p, s.mask) for p, s in zip(pred, batch))
        train_iou = class_iou(merge_counts(counts), POLYP)
        val_iou = evaluate_segmenter(model, val) if val else train_iou
        history.records.append(EpochRecord(epoch, sum(losses) / len(train), train_iou, val_iou, lr,
                                           time.perf_counter() - t0))
        logger.info("%s epoch %d loss %.4f train_iou %.4f val_iou %.4f", name, epoch,
                    history.records[-1].train_loss, train_iou, val_iou)
        if val_iou > best_val:
            best_val = val_iou
            best = make_checkpoint(model, stage=name, epoch=epoch, val_metric=val_iou)
    _persist(model, best, history, out_dir, name)
    return best, history


def _persist(model, best, history, out_dir, name):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    save_checkpoint(out_dir / "checkpoints" / f"{name}_best.npz", best)
    save_checkpoint(out_dir / "checkpoints" / f"{name}_final.npz",
                    make_checkpoint(model, stage=name, epoch=len(history) - 1,
                                    val_metric=history.records[-1].val_metric))
    history.to_csv(out_dir / "histories" / f"{name}.csv")


def _patch_arrays(patches, size):
    images = np.stack([letterbox(p.image, size)[0] for p in patches]) if patches else None
    labels = np.array([PatchLabel(p.label).target for p in patches], dtype=np.float32)
    return images, labels


def balanced_order(labels, rng):
    """Epoch index order with the minority class resampled up to the majority count."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    major, minor = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    extra = rng.choice(minor, size=len(major), replace=True)
    return rng.permutation(np.concatenate([major, extra]))


@torch.no_grad()
def _classifier_probs(model, images, batch_size=64):
    model.eval()
    device = _device(model)
    out = [torch.sigmoid(model(preprocess(images[i:i + batch_size], device))).cpu().numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def train_classifier(model, train_patches, val_patches, spec, seed=0, aug=None,
                     out_dir=None, name="cnn"):
    """Minimize BCE on class-balanced minibatches; select on validation accuracy."""
    if model.kind != PATCH_CLASSIFIER:
        raise ValueError(f"train_classifier needs a {PATCH_CLASSIFIER}, got {model.kind}")
    size = model.spec.input_size
    x_train, y_train = _patch_arrays(train_patches, size)
    if x_train is None or len(np.unique(y_train)) < 2:
        raise ValueError("classifier training needs both polyp and background patches")
    x_val, y_val = _patch_arrays(val_patches, size)
    device = _device(model)
    opt = make_optimizer(model.parameters(), spec)
    history = TrainHistory(metric_name="accuracy")
    best, best_val = None, -math.inf
    torch.manual_seed(seed)
    for epoch in range(spec.epochs):
        t0 = time.perf_counter()
        lr = lr_at(spec, epoch)
        _set_lr(opt, lr)
        model.train()
        order = balanced_order(y_train, np.random.default_rng([seed, epoch]))
        losses, correct = [], 0
        for b, start in enumerate(range(0, len(order), spec.batch_size)):
            idx = order[start:start + spec.batch_size]
            images = x_train[idx]
            if aug is not None:
                images = np.stack([augment_image(im, aug, np.random.default_rng([seed, epoch, start + k]))
                                   for k, im in enumerate(images)])
            x = preprocess(images, device)
            y = torch.from_numpy(y_train[idx]).to(device)
            probs = torch.sigmoid(model(x))
            loss = bce_loss(probs, y)
            _check_finite(loss, epoch, b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
            correct += int(((probs.detach() >= 0.5).float() == y).sum())
        train_acc = correct / len(order)
        if x_val is not None:
            val_acc = classification_accuracy(_classifier_probs(model, x_val) >= 0.5, y_val)
        else:
            val_acc = train_acc
        history.records.append(EpochRecord(epoch, sum(losses) / len(order), train_acc, val_acc, lr,
                                           time.perf_counter() - t0))
        logger.info("%s epoch %d loss %.4f train_acc %.4f val_acc %.4f", name, epoch,
                    history.records[-1].train_loss, train_acc, val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best = make_checkpoint(model, stage=name, epoch=epoch, val_metric=val_acc)
    _persist(model, best, history, out_dir, name)
    return best, history


# -- schemes -----------------------------------------------------------------

SCHEME_STAGES = {
    "s0_baseline": ("S0",),
    "scheme1": ("S1", "C2", "S3"),
    "scheme2": ("C1", "S2", "C3"),
    "scheme1_extended": ("S1", "C2", "S3", "C2b", "S4"),
}


@dataclass
class StageResult:
    name: str
    checkpoint: object
    history: TrainHistory
    initial_backbone: object
    source: str


@dataclass
class SchemeResult:
    scheme: str
    stages: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.stages[name]

    def __contains__(self, name):
        return name in self.stages

    def names(self):
        return list(self.stages)


def _write_manifest(run_dir, result, status, error=None):
    if run_dir is None:
        return
    manifest = {"scheme": result.scheme, "status": status, "stages": []}
    for st in result.stages.values():
        manifest["stages"].append({
            "name": st.name,
            "kind": st.checkpoint.kind,
            "init_from": st.source,
            "best_epoch": st.checkpoint.meta.get("epoch"),
            "best_val_metric": st.checkpoint.meta.get("val_metric"),
            "epochs": len(st.history),
            "checkpoint": f"checkpoints/{st.name}_best.npz",
            "history": f"histories/{st.name}.csv",
        })
    if error:
        manifest["error"] = error
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2))


def stage_plan(scheme):
    """(stage name, model kind, backbone donor) triples; donor 'imagenet' or 'random'."""
    if scheme not in SCHEME_STAGES:
        raise ValueError(f"unknown scheme {scheme!r}")
    names = SCHEME_STAGES[scheme]
    plan = []
    for i, name in enumerate(names):
        kind = FCN_SEGMENTER if name.startswith("S") else PATCH_CLASSIFIER
        if i > 0:
            donor = names[i - 1]
        else:
            donor = "random" if scheme == "s0_baseline" else "imagenet"
        plan.append((name, kind, donor))
    return plan


def run_scheme(scheme, data, cfg, run_dir=None):
    """Train the stage chain of ``scheme`` and return every stage's result.

    Stages run in order; each new network gets freshly initialized heads and
    the donor stage's best-validation backbone. A failing stage raises
    :class:`SchemeError` after the completed stages have been persisted.
    """
    if not isinstance(cfg, ExperimentConfig):
        raise TypeError("cfg must be an ExperimentConfig")
    plan = stage_plan(scheme)
    if plan[0][2] == "imagenet":
        if not cfg.pretrained_path or not Path(cfg.pretrained_path).is_file():
            raise FileNotFoundError(f"scheme {scheme} needs a pretrained backbone file, "
                                    f"got pretrained_path={cfg.pretrained_path!r}")
    if run_dir is not None:
        save_config(cfg.with_overrides(scheme=scheme), Path(run_dir) / "config.yaml")
    if cfg.deterministic:
        set_deterministic(True)

    patches = None
    if any(kind == PATCH_CLASSIFIER for _, kind, _ in plan):
        n = cfg.cnn.background_per_image
        patches = (generate_patches(data.train, n, seed=derive_seed(cfg.seed, 101)),
                   generate_patches(data.val, n, seed=derive_seed(cfg.seed, 102)))

    result = SchemeResult(scheme)
    fcn_spec = ModelSpec(FCN_SEGMENTER, input_size=cfg.input_hw, backbone=cfg.backbone)
    cnn_spec = ModelSpec(PATCH_CLASSIFIER, input_size=cfg.cnn.input_size, backbone=cfg.backbone)
    for k, (name, kind, donor) in enumerate(plan):
        try:
            stage_seed = derive_seed(cfg.seed, k)
            model = random_init(build_model(fcn_spec if kind == FCN_SEGMENTER else cnn_spec),
                                stage_seed)
            if donor == "imagenet":
                inject_backbone_weights(model, load_pretrained_backbone(cfg.pretrained_path,
                                                                        cfg.backbone))
            elif donor != "random":
                inject_backbone_weights(model, result[donor].checkpoint.backbone_weights())
            initial = extract_backbone_weights(model)
            if kind == FCN_SEGMENTER:
                ckpt, hist = train_segmentation(model, data, cfg.fcn.optimizer_spec(cfg.epoch_scale),
                                                cfg.augment, stage_seed, run_dir, name)
            else:
                aug = cfg.augment if cfg.cnn.augment_patches else None
                ckpt, hist = train_classifier(model, patches[0], patches[1],
                                              cfg.cnn.optimizer_spec(cfg.epoch_scale), stage_seed,
                                              aug, run_dir, name)
        except Exception as exc:
            _write_manifest(run_dir, result, "failed", f"{name}: {exc}")
            raise SchemeError(name, exc) from exc
        result.stages[name] = StageResult(name, ckpt, hist, initial, donor)
        _write_manifest(run_dir, result, "running")
    _write_manifest(run_dir, result, "complete")
    return result
