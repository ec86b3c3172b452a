"""Command-line entry point: ``polypfcn <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import click
import numpy as np

from . import datasets as ds
from .config import ExperimentConfig, load_config, save_config
from .metrics import write_objects_csv
from .models import (FCN_SEGMENTER, PATCH_CLASSIFIER, BackboneConfig, ModelSpec, build_backbone,
                     build_model, convert_torchvision_resnet50, extract_backbone_weights,
                     inject_backbone_weights, load_checkpoint, load_pretrained_backbone,
                     model_from_checkpoint, random_init, save_backbone)
from .pipeline import PolypPipeline, benchmark, evaluate, render_overlay, resize_samples
from .refinement import RefinementConfig, write_report_jsonl
from .training import derive_seed, run_scheme, set_deterministic, train_segmentation

logger = logging.getLogger("polypfcn")

RUN_SUBDIRS = ("checkpoints", "histories", "reports", "overlays")


def _prepare_output(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise click.UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _make_run_dir(path, force):
    path = _prepare_output(path, force)
    for sub in RUN_SUBDIRS:
        (path / sub).mkdir(exist_ok=True)
    return path


def _load_cfg(config, seed=None, output=None, deterministic=None, **overrides):
    cfg = load_config(config) if config else ExperimentConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if seed is not None:
        changes["seed"] = seed
    if output is not None:
        changes["output_dir"] = str(output)
    if deterministic is not None:
        changes["deterministic"] = deterministic
    return cfg.with_overrides(**changes) if changes else cfg


def _model_of_kind(path, kind):
    ckpt = load_checkpoint(path)
    if ckpt.kind != kind:
        raise click.ClickException(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
    return model_from_checkpoint(ckpt)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    """Atrous-FCN polyp segmentation with patch-classifier refinement."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@cli.command()
@click.option("--output", "-o", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=1, show_default=True)
@click.option("--n-train", default=60, show_default=True)
@click.option("--n-val", default=20, show_default=True)
@click.option("--n-test", default=20, show_default=True)
@click.option("--size", default=128, show_default=True, help="Square image side in pixels.")
@click.option("--empty-prob", default=0.0, show_default=True,
              help="Probability that a frame has no polyp.")
@click.option("--force", is_flag=True)
def synth(output, seed, n_train, n_val, n_test, size, empty_prob, force):
    """Write a synthetic dataset in the generic layout."""
    out = _prepare_output(output, force)
    split = ds.synth_dataset(n_train, n_val, n_test, (size, size), seed, empty_prob)
    ds.write_generic_layout(split, out)
    click.echo(f"wrote {sum(split.sizes())} samples to {out}")


@cli.command("gen-patches")
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--layout", default="generic", type=click.Choice(["generic", "endoscene", "kvasir"]))
@click.option("--split", "split_name", default="train", type=click.Choice(ds.SPLITS))
@click.option("--output", "-o", required=True, type=click.Path(file_okay=False))
@click.option("--background-per-image", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--force", is_flag=True)
def gen_patches(data_root, layout, split_name, output, background_per_image, seed, force):
    """Cut polyp and background patches for classifier training."""
    out = _prepare_output(output, force)
    samples = ds.load_dataset(data_root, layout)[split_name]
    patches = ds.generate_patches(samples, background_per_image, seed=seed)
    with open(out / "patches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label", "source_id", "row_min", "col_min", "row_max", "col_max"])
        for i, p in enumerate(patches):
            rel = f"{p.label.value}/{p.source_id}_{i:05d}.png"
            ds.write_image(out / rel, p.image)
            w.writerow([rel, p.label.value, p.source_id, *p.source_bbox])
    n_polyp = sum(p.label is ds.PatchLabel.POLYP for p in patches)
    click.echo(f"wrote {n_polyp} polyp and {len(patches) - n_polyp} background patches to {out}")


@cli.command()
@click.option("--config", "-c", "config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scheme", type=click.Choice(["scheme1", "scheme2", "scheme1_extended", "s0_baseline"]))
@click.option("--seed", type=int)
@click.option("--output", "-o", type=click.Path(file_okay=False))
@click.option("--epoch-scale", type=float)
@click.option("--pretrained", "pretrained_path", type=click.Path())
@click.option("--deterministic/--no-deterministic", default=None)
@click.option("--force", is_flag=True)
def train(config, scheme, seed, output, epoch_scale, pretrained_path, deterministic, force):
    """Run a weight-circulation training scheme."""
    cfg = _load_cfg(config, seed, output, deterministic, scheme=scheme, epoch_scale=epoch_scale,
                    pretrained_path=pretrained_path)
    if cfg.scheme != "s0_baseline" and not (cfg.pretrained_path and Path(cfg.pretrained_path).is_file()):
        raise click.ClickException(f"scheme {cfg.scheme} needs a pretrained backbone; "
                                   f"pretrained_path={cfg.pretrained_path!r} is not a file")
    run_dir = _make_run_dir(cfg.output_dir, force)
    data = ds.load_dataset(cfg.dataset.root, cfg.dataset.layout, cfg.dataset.max_side)
    result = run_scheme(cfg.scheme, data, cfg, run_dir)
    for name, st in result.stages.items():
        click.echo(f"{name}: best epoch {st.checkpoint.meta['epoch']} "
                   f"val {st.history.metric_name} {st.checkpoint.meta['val_metric']:.4f}")
    click.echo(f"run directory: {run_dir}")


@cli.command("init-backbone")
@click.option("--output", "-o", required=True, type=click.Path(dir_okay=False))
@click.option("--from-torchvision", "tv_path", type=click.Path(exists=True, dir_okay=False),
              help="torchvision resnet50 state dict (.pth) to convert.")
@click.option("--base-width", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--force", is_flag=True)
def init_backbone(output, tv_path, base_width, seed, force):
    """Write a pretrained-backbone file: converted torchvision weights or a seeded random init."""
    out = Path(output)
    if out.exists() and not force:
        raise click.UsageError(f"{out} exists (use --force to overwrite)")
    if tv_path:
        import torch
        cfg = BackboneConfig()
        weights = convert_torchvision_resnet50(torch.load(tv_path, map_location="cpu"))
        source = f"torchvision:{Path(tv_path).name}"
    else:
        cfg = BackboneConfig(base_width=base_width)
        weights = extract_backbone_weights(random_init(build_backbone(cfg), seed))
        source = f"random_init:{seed}"
    inject_backbone_weights(build_backbone(cfg), weights)
    save_backbone(out, weights, cfg, source=source)
    click.echo(f"wrote {len(weights)} backbone arrays to {out}")


def _parse_sizes(text):
    try:
        sizes = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError as exc:
        raise click.BadParameter(f"cannot parse sizes {text!r}") from exc
    bad = [s for s in sizes if s <= 0 or s % 16]
    if bad:
        raise click.BadParameter(f"sizes must be divisible by 16; offending: {bad}")
    if not sizes:
        raise click.BadParameter("no sizes given")
    return sizes


@cli.command("ablate-input-size")
@click.option("--config", "-c", "config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sizes", default="192,224,256,320,384", show_default=True)
@click.option("--seed", type=int)
@click.option("--output", "-o", type=click.Path(file_okay=False))
@click.option("--epoch-scale", type=float)
@click.option("--deterministic/--no-deterministic", default=None)
@click.option("--force", is_flag=True)
def ablate_input_size(config, sizes, seed, output, epoch_scale, deterministic, force):
    """Train one segmenter per input size and record validation IoU curves."""
    sizes = _parse_sizes(sizes)
    cfg = _load_cfg(config, seed, output, deterministic, epoch_scale=epoch_scale)
    run_dir = _make_run_dir(cfg.output_dir, force)
    save_config(cfg, run_dir / "config.yaml")
    if cfg.deterministic:
        set_deterministic(True)
    data = ds.load_dataset(cfg.dataset.root, cfg.dataset.layout, cfg.dataset.max_side)
    pretrained = load_pretrained_backbone(cfg.pretrained_path, cfg.backbone) if cfg.pretrained_path else None
    rows = ablate_sizes(data, cfg, sizes, pretrained, run_dir)
    csv_path = run_dir / "reports" / "input_size_ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["input_size", "epoch", "train_loss", "train_iou", "val_iou"])
        w.writeheader()
        w.writerows(rows)
    plot_curves(rows, run_dir / "reports" / "input_size_ablation.png")
    click.echo(f"wrote {csv_path}")


def ablate_sizes(data, cfg, sizes, pretrained=None, run_dir=None):
    rows = []
    for size in sizes:
        spec = ModelSpec(FCN_SEGMENTER, input_size=size, backbone=cfg.backbone)
        seed = derive_seed(cfg.seed, size)
        model = random_init(build_model(spec), seed)
        if pretrained is not None:
            inject_backbone_weights(model, pretrained)
        _, hist = train_segmentation(model, data, cfg.fcn.optimizer_spec(cfg.epoch_scale),
                                     cfg.augment, seed, run_dir, f"size{size}")
        for r in hist.records:
            rows.append({"input_size": size, "epoch": r.epoch, "train_loss": repr(r.train_loss),
                         "train_iou": repr(r.train_metric), "val_iou": repr(r.val_metric)})
    return rows


def plot_curves(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for size in sorted({r["input_size"] for r in rows}):
        pts = [(r["epoch"], float(r["val_iou"])) for r in rows if r["input_size"] == size]
        ax.plot(*zip(*pts), label=str(size))
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation polyp IoU")
    ax.legend(title="input size")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--layout", default="generic", type=click.Choice(["generic", "endoscene", "kvasir"]))
@click.option("--split", "split_name", default="test", type=click.Choice(ds.SPLITS))
@click.option("--refine", "refine_ckpt", type=click.Path(exists=True, dir_okay=False),
              help="Patch classifier checkpoint; also report refined metrics.")
@click.option("--eval-at", default="native", type=click.Choice(["native", "input_size"]))
@click.option("--rule", default="any_overlap", type=click.Choice(["any_overlap", "iou"]))
@click.option("--tau", default=0.5, show_default=True)
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--tag", default="S", show_default=True, help="Model tag for the objects CSV.")
@click.option("--output", "-o", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
def eval_cmd(checkpoint, data_root, layout, split_name, refine_ckpt, eval_at, rule, tau, threshold,
             tag, output, force):
    """Pixel and object metrics, with and without refinement."""
    out = _prepare_output(output, force)
    segmenter = _model_of_kind(checkpoint, FCN_SEGMENTER)
    classifier = _model_of_kind(refine_ckpt, PATCH_CLASSIFIER) if refine_ckpt else None
    samples = ds.load_dataset(data_root, layout)[split_name]
    if eval_at == "input_size":
        samples = resize_samples(samples, segmenter.spec.input_size)
    pipe = PolypPipeline(segmenter, classifier, RefinementConfig(decision_threshold=threshold))
    raw, refined, regions = evaluate(samples, pipe.segment, pipe.refine if classifier else None,
                                     rule, tau)
    summary = write_eval_reports(out, tag, raw, refined, regions)
    click.echo(json.dumps(summary, indent=2))


def write_eval_reports(out, tag, raw, refined, regions):
    out = Path(out)
    raw.write_csv(out / "metrics.csv")
    objects = {tag: raw.objects}
    summary = {tag: {"micro": raw.micro, "macro": raw.macro}}
    if refined is not None:
        refined.write_csv(out / "metrics_refined.csv")
        objects[f"{tag}+refine"] = refined.objects
        summary[f"{tag}+refine"] = {"micro": refined.micro, "macro": refined.macro}
        write_report_jsonl(out / "regions.jsonl", regions)
    write_objects_csv(out / "objects.csv", objects)
    return summary


def _collect_inputs(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in ds.IMAGE_SUFFIXES)
        else:
            files.append(p)
    return files


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.argument("inputs", nargs=-1, required=True)
@click.option("--refine", "refine_ckpt", type=click.Path(exists=True, dir_okay=False))
@click.option("--overlay", is_flag=True, help="Also write overlay renderings.")
@click.option("--gt-dir", type=click.Path(exists=True, file_okay=False),
              help="Masks with matching stems; colours agreement in overlays.")
@click.option("--threshold", default=0.5, show_default=True)
@click.option("--output", "-o", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
def infer(checkpoint, inputs, refine_ckpt, overlay, gt_dir, threshold, output, force):
    """Segment images and write {0, 255} masks (refined when --refine is given)."""
    out = _prepare_output(output, force)
    segmenter = _model_of_kind(checkpoint, FCN_SEGMENTER)
    classifier = _model_of_kind(refine_ckpt, PATCH_CLASSIFIER) if refine_ckpt else None
    pipe = PolypPipeline(segmenter, classifier, RefinementConfig(decision_threshold=threshold))
    gt_index = ds._index_by_stem(gt_dir) if gt_dir else {}
    failures = 0
    for path in _collect_inputs(inputs):
        try:
            image = ds.read_image(path)
            raw, refined, report = pipe.predict(image)
            mask = raw if refined is None else refined
            ds.write_mask(out / "masks" / f"{path.stem}.png", mask)
            if overlay:
                gt = ds.read_mask(gt_index[path.stem]) if path.stem in gt_index else None
                ds.write_image(out / "overlays" / f"{path.stem}.png", render_overlay(image, mask, gt))
            if refined is not None:
                write_report_jsonl(out / "regions" / f"{path.stem}.jsonl", [(path.stem, report)])
        except (ds.DatasetError, OSError, ValueError) as exc:
            failures += 1
            click.echo(f"error: {path}: {exc}", err=True)
    if failures:
        raise click.ClickException(f"{failures} input(s) failed")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--refine", "refine_ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n-frames", default=50, show_default=True)
@click.option("--warmup", default=3, show_default=True)
@click.option("--input-size", type=int, help="Frame side length (default: model input size).")
@click.option("--seed", default=0, show_default=True)
@click.option("--output", "-o", type=click.Path(file_okay=False))
@click.option("--deterministic/--no-deterministic", default=True)
def bench(checkpoint, refine_ckpt, n_frames, warmup, input_size, seed, output, deterministic):
    """Per-frame latency of segmentation alone and with refinement (batch size 1)."""
    if n_frames < 10:
        raise click.BadParameter("--n-frames must be at least 10")
    if deterministic:
        set_deterministic(True)
    segmenter = _model_of_kind(checkpoint, FCN_SEGMENTER)
    classifier = _model_of_kind(refine_ckpt, PATCH_CLASSIFIER)
    size = input_size or segmenter.spec.input_size[0]
    rng = np.random.default_rng(seed)
    frames = [ds.synth_sample(f"f{i}", (size, size), rng).image for i in range(n_frames + warmup)]
    rows = benchmark(PolypPipeline(segmenter, classifier), frames, warmup)
    for r in rows:
        click.echo(f"{r['pipeline']:<9} mean {r['mean_ms']:.2f} ms  median {r['median_ms']:.2f} ms  "
                   f"p95 {r['p95_ms']:.2f} ms  {r['fps']:.1f} fps")
    if output:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "latency.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="polypfcn", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.Abort) as exc:
        if isinstance(exc, click.UsageError):
            exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except Exception as exc:  # runtime failure: report and exit 2
        click.echo(f"error: {exc}", err=True)
        logger.debug("command failed", exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
