import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml

from polypfcn import datasets as ds
from polypfcn.cli import _parse_sizes, main
from polypfcn.models import (FCN_SEGMENTER, PATCH_CLASSIFIER, BackboneConfig, ModelSpec,
                             build_classifier, build_fcn, extract_backbone_weights, load_checkpoint,
                             make_checkpoint, random_init, save_backbone, save_checkpoint)

TINY = BackboneConfig(base_width=4)


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "-o", str(root), "--seed", "1", "--n-train", "4", "--n-val", "2",
                 "--n-test", "2", "--size", "64", "--force"]) == 0
    return root


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    fcn = random_init(build_fcn(ModelSpec(FCN_SEGMENTER, input_size=64, backbone=TINY)), 0)
    keep = random_init(build_classifier(ModelSpec(PATCH_CLASSIFIER, input_size=32, backbone=TINY)), 0)
    with torch.no_grad():
        keep.fc.weight.zero_()
        keep.fc.bias.fill_(50.0)
        # constant segmenters: "fcn" predicts all background, "fcn_fg" all polyp
        fcn.score.weight.zero_()
        fcn.score.bias.copy_(torch.tensor([1.0, 0.0]))
    paths = {"fcn": save_checkpoint(root / "fcn.npz", make_checkpoint(fcn)),
             "keep": save_checkpoint(root / "keep.npz", make_checkpoint(keep))}
    with torch.no_grad():
        fcn.score.bias.copy_(torch.tensor([0.0, 1.0]))
    paths["fcn_fg"] = save_checkpoint(root / "fcn_fg.npz", make_checkpoint(fcn))
    with torch.no_grad():
        keep.fc.bias.fill_(-50.0)
    paths["drop"] = save_checkpoint(root / "drop.npz", make_checkpoint(keep))
    save_backbone(root / "pre.npz", extract_backbone_weights(fcn), TINY)
    paths["pre"] = root / "pre.npz"
    return paths


def test_synth_layout_and_rerun(tmp_path):
    out = tmp_path / "d"
    assert main(["synth", "-o", str(out), "--seed", "1", "--n-train", "4", "--n-val", "2",
                 "--n-test", "2", "--size", "64"]) == 0
    images = sorted((out).rglob("images/*.png"))
    masks = sorted((out).rglob("masks/*.png"))
    assert len(images) == len(masks) == 8
    first = _digest(out)
    # non-empty target without --force is a usage error and leaves files alone
    assert main(["synth", "-o", str(out), "--seed", "2"]) == 1
    assert _digest(out) == first
    assert main(["synth", "-o", str(out), "--seed", "1", "--n-train", "4", "--n-val", "2",
                 "--n-test", "2", "--size", "64", "--force"]) == 0
    assert _digest(out) == first
    m = ds.read_mask(masks[0])
    assert set(np.unique(ds.read_image(masks[0])[..., 0])) <= {0, 255}
    assert m.shape == (64, 64)


def test_gen_patches(data_dir, tmp_path):
    before = _digest(data_dir)
    out = tmp_path / "p"
    assert main(["gen-patches", "--data", str(data_dir), "-o", str(out), "--split", "train"]) == 0
    rows = list(csv.DictReader(open(out / "patches.csv")))
    assert {r["label"] for r in rows} <= {"polyp", "background"}
    assert any(r["label"] == "polyp" for r in rows)
    for r in rows:
        img = ds.read_image(out / r["file"])
        assert img.shape[:2] == (int(r["row_max"]) - int(r["row_min"]),
                                 int(r["col_max"]) - int(r["col_min"]))
    assert _digest(data_dir) == before


def test_parse_sizes():
    assert _parse_sizes("192,224,256,320,384") == [192, 224, 256, 320, 384]
    with pytest.raises(Exception, match=r"\[200\]"):
        _parse_sizes("192,200")


def test_ablation_rejects_size_200(tmp_path, data_dir, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"root": str(data_dir)}}))
    assert main(["ablate-input-size", "-c", str(cfg), "--sizes", "192,200", "-o",
                 str(tmp_path / "o")]) == 1
    assert "200" in capsys.readouterr().err


def _tiny_config(path, data_dir, out, **kw):
    cfg = {"dataset": {"root": str(data_dir)}, "input_size": 64, "seed": 0,
           "backbone": {"base_width": 4}, "output_dir": str(out),
           "fcn": {"lr": 1e-3, "epochs": 2, "batch_size": 2},
           "cnn": {"lr": 1e-2, "epochs": 1, "batch_size": 4, "input_size": 32}, **kw}
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_ablation_outputs(tmp_path, data_dir):
    cfg = _tiny_config(tmp_path / "c.yaml", data_dir, tmp_path / "run")
    assert main(["ablate-input-size", "-c", str(cfg), "--sizes", "32,64"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "run/reports/input_size_ablation.csv")))
    assert len(rows) == 2 * 2
    assert [int(r["input_size"]) for r in rows] == [32, 32, 64, 64]
    assert (tmp_path / "run/reports/input_size_ablation.png").stat().st_size > 0


def test_train_scheme1(tmp_path, data_dir, ckpts):
    cfg = _tiny_config(tmp_path / "c.yaml", data_dir, tmp_path / "run", scheme="scheme1",
                       pretrained_path=str(ckpts["pre"]))
    assert main(["train", "-c", str(cfg)]) == 0
    run = tmp_path / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert [s["name"] for s in manifest["stages"]] == ["S1", "C2", "S3"]
    for s in manifest["stages"]:
        load_checkpoint(run / s["checkpoint"])
        assert (run / s["history"]).is_file()
    assert (run / "config.yaml").is_file()


def test_train_s0_without_pretrained(tmp_path, data_dir):
    cfg = _tiny_config(tmp_path / "c.yaml", data_dir, tmp_path / "run", scheme="s0_baseline")
    assert main(["train", "-c", str(cfg)]) == 0
    assert (tmp_path / "run/checkpoints/S0_best.npz").is_file()


def test_train_scheme1_without_pretrained_fails_early(tmp_path, data_dir, capsys):
    cfg = _tiny_config(tmp_path / "c.yaml", data_dir, tmp_path / "run", scheme="scheme1")
    assert main(["train", "-c", str(cfg)]) == 2
    assert "pretrained" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_eval_with_keep_all_refinement(tmp_path, data_dir, ckpts):
    out = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(ckpts["fcn_fg"]), "--data", str(data_dir),
                 "--refine", str(ckpts["keep"]), "--tag", "S3", "-o", str(out)]) == 0
    raw = (out / "metrics.csv").read_text()
    assert raw == (out / "metrics_refined.csv").read_text()
    rows = {r["model_tag"]: r for r in csv.DictReader(open(out / "objects.csv"))}
    assert set(rows) == {"S3", "S3+refine"}
    assert int(rows["S3"]["TP"]) == 2  # one whole-frame region per test image
    regions = [json.loads(line) for line in open(out / "regions.jsonl")]
    assert len(regions) == 2 and all(r["kept"] for r in regions)
    assert int(rows["S3+refine"]["FP"]) <= int(rows["S3"]["FP"])


def test_eval_drop_all_and_input_size_mode(tmp_path, data_dir, ckpts):
    out = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(ckpts["fcn_fg"]), "--data", str(data_dir),
                 "--refine", str(ckpts["drop"]), "--eval-at", "input_size", "-o", str(out)]) == 0
    rows = {r["model_tag"]: r for r in csv.DictReader(open(out / "objects.csv"))}
    assert int(rows["S"]["TP"]) == 2
    assert int(rows["S+refine"]["FP"]) == int(rows["S+refine"]["TP"]) == 0


def test_eval_rejects_wrong_kind(tmp_path, data_dir, ckpts):
    assert main(["eval", "--checkpoint", str(ckpts["keep"]), "--data", str(data_dir),
                 "-o", str(tmp_path / "e")]) == 2


def test_infer_masks_overlays_and_bad_file(tmp_path, data_dir, ckpts, capsys):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    images = data_dir / "test" / "images"
    out = tmp_path / "i"
    code = main(["infer", "--checkpoint", str(ckpts["fcn_fg"]), str(images), str(bad),
                 "--refine", str(ckpts["keep"]), "--overlay", "--gt-dir", str(data_dir / "test/masks"),
                 "-o", str(out)])
    assert code == 2
    assert "broken.png" in capsys.readouterr().err
    for src in sorted(images.iterdir()):
        mask = ds.read_image(out / "masks" / f"{src.stem}.png")[..., 0]
        assert set(np.unique(mask)) <= {0, 255}
        assert ds.read_image(out / "overlays" / f"{src.stem}.png").shape == ds.read_image(src).shape
        assert (out / "regions" / f"{src.stem}.jsonl").exists()


def test_infer_background_biased_model_gives_empty_mask(tmp_path, data_dir, ckpts):
    out = tmp_path / "i"
    src = next((data_dir / "test" / "images").iterdir())
    assert main(["infer", "--checkpoint", str(ckpts["fcn"]), str(src), "-o", str(out)]) == 0
    assert not ds.read_image(out / "masks" / f"{src.stem}.png").any()


def test_bench(tmp_path, ckpts, capsys):
    assert main(["bench", "--checkpoint", str(ckpts["fcn"]), "--refine", str(ckpts["keep"]),
                 "--n-frames", "10", "-o", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "latency.csv")))
    assert [r["pipeline"] for r in rows] == ["S", "S+refine"]
    assert float(rows[1]["mean_ms"]) >= float(rows[0]["mean_ms"])
    assert main(["bench", "--checkpoint", str(ckpts["fcn"]), "--refine", str(ckpts["keep"]),
                 "--n-frames", "5"]) == 1


def test_usage_errors_exit_1():
    assert main(["no-such-verb"]) == 1
    assert main(["synth"]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "polypfcn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("synth", "gen-patches", "train", "ablate-input-size", "eval", "infer", "bench"):
        assert verb in res.stdout


def test_init_backbone(tmp_path):
    import torchvision
    from polypfcn.models import load_pretrained_backbone
    out = tmp_path / "w.npz"
    assert main(["init-backbone", "-o", str(out), "--base-width", "4", "--seed", "3"]) == 0
    w = load_pretrained_backbone(out, TINY)
    assert "stage4.block3.norm3.running_var" in w
    assert main(["init-backbone", "-o", str(out)]) == 1
    pth = tmp_path / "tv.pth"
    torch.save(torchvision.models.resnet50().state_dict(), pth)
    assert main(["init-backbone", "-o", str(tmp_path / "tv.npz"), "--from-torchvision", str(pth)]) == 0
    assert load_checkpoint(tmp_path / "tv.npz").meta["source"] == "torchvision:tv.pth"
