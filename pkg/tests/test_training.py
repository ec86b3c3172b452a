import json
import math

import numpy as np
import pytest
import torch

from polypfcn.config import (CNNConfig, ExperimentConfig, FCNConfig, OptimizerSpec, load_config,
                             save_config, scaled_epochs)
from polypfcn.datasets import AugmentConfig, DatasetSplit, Patch, PatchLabel, synth_dataset
from polypfcn.models import (FCN_SEGMENTER, PATCH_CLASSIFIER, BackboneConfig, ModelSpec,
                             build_classifier, build_fcn, build_model, extract_backbone_weights,
                             load_checkpoint, random_init, save_backbone)
from polypfcn.training import (SchemeError, TrainHistory, balanced_order, bce_loss, ce_loss,
                               derive_seed, lr_at, run_scheme, softmax, stage_plan,
                               train_classifier, train_segmentation)

TINY = BackboneConfig(base_width=4)


# -- losses --------------------------------------------------------------------

def test_bce_examples():
    assert float(bce_loss([0.5], [1])) == pytest.approx(0.693147, abs=1e-6)
    assert float(bce_loss([0.9, 0.2], [1, 0])) == pytest.approx(0.164252, abs=1e-6)
    assert float(bce_loss([1.0, 0.0], [1, 0])) <= 1e-6
    assert float(bce_loss([0.0], [1])) == pytest.approx(-math.log(1e-7), rel=1e-9)
    with pytest.raises(ValueError):
        bce_loss([], [])


def test_softmax_examples():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]).numpy(), [0.090031, 0.244728, 0.665241],
                               atol=1e-6)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=5) * 20
        k = rng.uniform(-500, 500)
        a, b = softmax(x).numpy(), softmax(x + k).numpy()
        assert abs(a.sum() - 1) < 1e-6 and np.all(a > 0)
        assert np.max(np.abs(a - b)) < 1e-6
    assert np.isfinite(softmax([1000.0, -1000.0]).numpy()).all()


def test_ce_examples():
    logits = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
    targets = torch.from_numpy(np.random.default_rng(0).integers(0, 2, (2, 3, 3)))
    assert float(ce_loss(logits, targets)) == pytest.approx(math.log(2), abs=1e-6)
    one = torch.tensor([[10.0, -10.0]], dtype=torch.float64)
    assert float(ce_loss(one, torch.tensor([0]))) == pytest.approx(2.06e-9, rel=1e-2)
    assert float(ce_loss(one, torch.tensor([0]))) < 1e-6
    with pytest.raises(ValueError):
        ce_loss(one, torch.tensor([2]))
    big = torch.tensor([[1e4, -1e4]], dtype=torch.float64)
    assert math.isfinite(float(ce_loss(big, torch.tensor([1]))))


def _central_diff(f, x, h=1e-3):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=(1, 2, 2, 2))
        t = torch.from_numpy(rng.integers(0, 2, (1, 2, 2)))
        xt = torch.tensor(x, requires_grad=True)
        ce_loss(xt, t).backward()
        fd = _central_diff(lambda v: float(ce_loss(torch.from_numpy(v), t)), x)
        assert _rel_err(xt.grad.numpy(), fd) < 1e-4


def test_bce_gradient_through_sigmoid_matches_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(20):
        z = rng.normal(size=6)
        t = rng.integers(0, 2, 6).astype(np.float64)
        zt = torch.tensor(z, requires_grad=True)
        bce_loss(torch.sigmoid(zt), t).backward()
        fd = _central_diff(lambda v: float(bce_loss(torch.sigmoid(torch.from_numpy(v)), t)), z)
        assert _rel_err(zt.grad.numpy(), fd) < 1e-4


# -- schedule ------------------------------------------------------------------

def test_lr_schedule():
    spec = OptimizerSpec("sgd_momentum", 1e-3, 0.9, "cosine_decay", 250, 24)
    assert lr_at(spec, 0) == 1e-3
    assert lr_at(spec, 125) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(spec, 249) == pytest.approx(3.948e-8, rel=1e-3)
    values = [lr_at(spec, e) for e in range(250)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    for e, v in enumerate(values):
        closed = 1e-3 * 0.5 * (1 + math.cos(math.pi * e / 250))
        assert abs(v - closed) <= 1e-12 * closed
    const = OptimizerSpec(lr=2e-4, epochs=3)
    assert [lr_at(const, e) for e in range(3)] == [2e-4] * 3
    with pytest.raises(ValueError):
        lr_at(spec, 250)
    with pytest.raises(ValueError):
        lr_at(spec, -1)


def test_optimizer_spec_validation():
    with pytest.raises(ValueError):
        OptimizerSpec(lr=0)
    with pytest.raises(ValueError):
        OptimizerSpec(epochs=0)
    with pytest.raises(ValueError):
        OptimizerSpec(kind="rmsprop")
    assert scaled_epochs(500, 0.02) == 10 and scaled_epochs(250, 0.001) == 1


# -- segmentation loop ---------------------------------------------------------

def _fcn(seed=0, size=64):
    return random_init(build_fcn(ModelSpec(FCN_SEGMENTER, input_size=size, backbone=TINY)), seed)


def test_segmentation_smoke(small_split, tmp_path):
    spec = OptimizerSpec(lr=1e-3, epochs=1, batch_size=2)
    ckpt, hist = train_segmentation(_fcn(), small_split, spec, seed=0, out_dir=tmp_path, name="S0")
    assert len(hist) == 1 and math.isfinite(hist.records[0].train_loss)
    assert ckpt.kind == FCN_SEGMENTER
    for f in ("checkpoints/S0_best.npz", "checkpoints/S0_final.npz", "histories/S0.csv"):
        assert (tmp_path / f).is_file()
    assert load_checkpoint(tmp_path / "checkpoints/S0_best.npz").weights.equals(ckpt.weights)
    back = TrainHistory.from_csv(tmp_path / "histories/S0.csv")
    assert back.records[0].train_loss == hist.records[0].train_loss


def test_segmentation_memorizes_two_samples():
    # at 64 px a stride-16 head has only 4x4 logits and plateaus; 128 px leaves room to fit
    data = synth_dataset(2, 0, 0, (128, 128), 5)
    model = random_init(build_fcn(ModelSpec(FCN_SEGMENTER, input_size=128,
                                            backbone=BackboneConfig(base_width=8))), 1)
    spec = OptimizerSpec(lr=1e-3, epochs=100, batch_size=2)
    _, hist = train_segmentation(model, data, spec, aug=AugmentConfig.identity(), seed=1)
    losses = hist.column("train_loss")
    assert all(l <= losses[0] for l in losses[1:])
    assert losses[-1] < 0.05 * losses[0]


def test_segmentation_is_deterministic(small_split):
    spec = OptimizerSpec(lr=1e-3, epochs=2, batch_size=2)
    runs = [train_segmentation(_fcn(2), small_split, spec, seed=7)[1] for _ in range(2)]
    strip = [[(r.train_loss, r.train_metric, r.val_metric, r.lr) for r in h.records] for h in runs]
    assert strip[0] == strip[1]


def test_segmentation_rejects_classifier(small_split):
    cnn = build_classifier(ModelSpec(PATCH_CLASSIFIER, input_size=32, backbone=TINY))
    with pytest.raises(ValueError):
        train_segmentation(cnn, small_split, OptimizerSpec(epochs=1))


def test_non_finite_loss_aborts_with_diagnostic(small_split):
    model = _fcn()
    with torch.no_grad():
        model.score.bias.fill_(float("nan"))
    with pytest.raises(Exception, match=r"epoch 0.*batch 0"):
        train_segmentation(model, small_split, OptimizerSpec(epochs=1, batch_size=2))


# -- classifier loop -----------------------------------------------------------

def _colour_patches(n, rng, flip=False):
    out = []
    for i in range(n):
        label = PatchLabel.POLYP if i % 2 == 0 else PatchLabel.BACKGROUND
        if flip:
            label = PatchLabel.POLYP if rng.random() < 0.5 else PatchLabel.BACKGROUND
        h, w = rng.integers(12, 28, 2)
        img = rng.integers(0, 60, (h, w, 3)).astype(np.uint8)
        channel = 0 if (label is PatchLabel.POLYP) != flip else 2
        img[..., channel] += 180
        out.append(Patch(img, label, (0, 0, int(h), int(w)), f"p{i}"))
    return out


def _cnn(seed=0):
    return random_init(build_classifier(ModelSpec(PATCH_CLASSIFIER, input_size=32, backbone=TINY)),
                       seed)


def test_classifier_learns_separable_patches():
    rng = np.random.default_rng(0)
    train, val = _colour_patches(40, rng), _colour_patches(20, rng)
    spec = OptimizerSpec("sgd_momentum", 1e-2, 0.9, "cosine_decay", 20, 8)
    _, hist = train_classifier(_cnn(), train, val, spec, seed=0)
    assert max(hist.column("val_metric")) >= 0.95


def test_classifier_chance_level_on_random_labels():
    rng = np.random.default_rng(1)
    train = _colour_patches(40, rng, flip=True)
    val = [Patch(p.image, PatchLabel.POLYP if rng.random() < 0.5 else PatchLabel.BACKGROUND,
                 p.source_bbox, p.source_id) for p in _colour_patches(60, rng)]
    spec = OptimizerSpec("sgd_momentum", 1e-3, 0.9, "cosine_decay", 1, 8)
    _, hist = train_classifier(_cnn(), train, val, spec, seed=0)
    assert 0.25 <= hist.records[0].val_metric <= 0.75


def test_classifier_determinism_and_single_class_error():
    rng = np.random.default_rng(2)
    train, val = _colour_patches(12, rng), _colour_patches(6, rng)
    spec = OptimizerSpec("sgd_momentum", 1e-2, 0.9, "cosine_decay", 2, 4)
    a = train_classifier(_cnn(3), train, val, spec, seed=5)[1]
    b = train_classifier(_cnn(3), train, val, spec, seed=5)[1]
    assert [(r.train_loss, r.val_metric) for r in a.records] == \
           [(r.train_loss, r.val_metric) for r in b.records]
    only_polyp = [p for p in train if p.label is PatchLabel.POLYP]
    with pytest.raises(ValueError, match="both"):
        train_classifier(_cnn(), only_polyp, val, spec)


def test_balanced_order():
    labels = np.array([1] * 3 + [0] * 10)
    order = balanced_order(labels, np.random.default_rng(0))
    assert len(order) == 20
    assert (labels[order] == 1).sum() == 10
    assert set(np.flatnonzero(labels == 0)) <= set(order)


# -- schemes -------------------------------------------------------------------

def test_stage_plans():
    assert [s for s, _, _ in stage_plan("scheme1")] == ["S1", "C2", "S3"]
    assert [d for _, _, d in stage_plan("scheme1")] == ["imagenet", "S1", "C2"]
    assert [s for s, _, _ in stage_plan("scheme2")] == ["C1", "S2", "C3"]
    assert [s for s, _, _ in stage_plan("scheme1_extended")] == ["S1", "C2", "S3", "C2b", "S4"]
    assert stage_plan("s0_baseline") == [("S0", FCN_SEGMENTER, "random")]
    with pytest.raises(ValueError):
        stage_plan("scheme3")


def _tiny_cfg(tmp_path, **kw):
    base = dict(input_size=64, seed=0, backbone=TINY, epoch_scale=1.0,
                fcn=FCNConfig(lr=1e-3, epochs=1, batch_size=2),
                cnn=CNNConfig(lr=1e-2, epochs=1, batch_size=4, input_size=32),
                output_dir=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def _pretrained(tmp_path):
    path = tmp_path / "pretrained.npz"
    save_backbone(path, extract_backbone_weights(random_init(
        build_model(ModelSpec(FCN_SEGMENTER, input_size=64, backbone=TINY)), 99)), TINY)
    return path


def test_scheme1_stages_and_transfer(small_split, tmp_path):
    cfg = _tiny_cfg(tmp_path, pretrained_path=str(_pretrained(tmp_path)))
    run = tmp_path / "run"
    result = run_scheme("scheme1", small_split, cfg, run)
    assert result.names() == ["S1", "C2", "S3"]
    assert result["S3"].initial_backbone.equals(result["C2"].checkpoint.backbone_weights())
    assert result["C2"].initial_backbone.equals(result["S1"].checkpoint.backbone_weights())
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert [s["name"] for s in manifest["stages"]] == ["S1", "C2", "S3"]
    assert load_config(run / "config.yaml") == cfg.with_overrides(scheme="scheme1")
    for name in ("S1", "C2", "S3"):
        assert (run / f"checkpoints/{name}_best.npz").is_file()


def test_s0_needs_no_pretrained(small_split, tmp_path):
    result = run_scheme("s0_baseline", small_split, _tiny_cfg(tmp_path, pretrained_path=None))
    assert result.names() == ["S0"]


def test_scheme_without_pretrained_fails_before_training(small_split, tmp_path):
    run = tmp_path / "run"
    with pytest.raises(FileNotFoundError):
        run_scheme("scheme1", small_split, _tiny_cfg(tmp_path, pretrained_path=None), run)
    assert not run.exists()


def test_failing_stage_keeps_completed_artifacts(tmp_path):
    # zero background patches per image leaves C2 with a single class
    data = synth_dataset(2, 1, 0, (64, 64), 4)
    cfg = _tiny_cfg(tmp_path, pretrained_path=str(_pretrained(tmp_path)),
                    cnn=CNNConfig(lr=1e-2, epochs=1, batch_size=4, input_size=32,
                                  background_per_image=0))
    run = tmp_path / "run"
    with pytest.raises(SchemeError) as err:
        run_scheme("scheme1", data, cfg, run)
    assert err.value.stage == "C2"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert [s["name"] for s in manifest["stages"]] == ["S1"]
    assert (run / "checkpoints/S1_best.npz").is_file()


def test_config_round_trip(tmp_path):
    cfg = _tiny_cfg(tmp_path, input_size=(64, 96), augment=AugmentConfig(rotation_max_deg=30))
    assert load_config(save_config(cfg, tmp_path / "c.yaml")) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"nonsense": 1})


def test_derive_seed_is_stable():
    assert derive_seed(0, 1) == derive_seed(0, 1) != derive_seed(0, 2)


def test_split_type():
    assert isinstance(synth_dataset(1, 1, 1, (32, 32), 0), DatasetSplit)
