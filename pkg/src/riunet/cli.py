"""Command-line entry point: ``riunet <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import math
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats, tensor
from .dataset import build_dataset, load_manifest, synthetic_sources
from .formats import Sample
from .metrics import DEFAULT_CLASS_NAMES, format_table, write_metrics_file
from .model import ModelConfig, UNetModel, load_weights, save_weights
from .projection import ProjectionConfig, backproject_labels, normalize_channels, project
from .scene import SceneSpec, generate_scene
from .trainer import TrainConfig, benchmark_inference, evaluate, evaluate_labels, train

# background mid-gray, cars blue, pedestrians lime, cyclists red; invalid pixels black
CLASS_COLORS = np.array([[128, 128, 128], [0, 0, 255], [0, 255, 0], [255, 0, 0]], dtype=np.uint8)
INVALID_COLOR = np.array([0, 0, 0], dtype=np.uint8)

COMMANDS = ("synth", "project", "build-dataset", "train", "eval", "infer", "render", "bench")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--config", type=Path, default=None, help="JSON file of flag values (command line wins)")
    g.add_argument("--width", type=int, default=512, help="range-image width in pixels")
    g.add_argument("--height", type=int, default=64, help="range-image height in pixels")
    g.add_argument("--classes", type=int, default=4, help="number of classes K incl. background")
    g.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    g.add_argument("--batch", type=int, default=8, help="batch size")
    g.add_argument("--epochs", type=int, default=10, help="training epochs")
    g.add_argument("--bn-momentum", type=float, default=0.99, help="batchnorm running-stat momentum")
    g.add_argument("--depth-levels", type=int, default=4, help="pooling stages of the U-Net")
    g.add_argument("--base-features", type=int, default=64, help="channels after the first block")
    g.add_argument("--deterministic", action="store_true", help="fixed-order reductions (single BLAS thread)")
    g.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="riunet", description="Range-image U-Net for LiDAR segmentation", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate labeled synthetic scans")
    p.add_argument("--count", type=int, default=8, help="number of scenes")

    p = sub.add_parser("project", parents=[common], formatter_class=fmt, help="point cloud -> range-image file")
    p.add_argument("--input", type=Path, required=True, help="point cloud .bin (labels read from a sibling .label)")

    p = sub.add_parser("build-dataset", parents=[common], formatter_class=fmt, help="project, split and weight a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="directory of .bin clouds with sibling .label files")
    src.add_argument("--synth", type=int, help="generate this many synthetic scenes instead")
    p.add_argument("--val", type=int, default=0, help="number of validation samples")
    p.add_argument("--w0", type=float, default=10.0, help="boundary weight amplitude")
    p.add_argument("--sigma", type=float, default=5.0, help="boundary weight width (pixels)")
    p.add_argument("--no-class-balance", action="store_true", help="disable inverse-frequency class weights")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train on a built dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--checkpoint-interval", type=int, default=1, help="epochs between checkpoints")
    p.add_argument("--no-recalibrate-bn", action="store_true", help="keep moving-average batchnorm stats at the end")

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="per-class IoU on a split")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint")
    p.add_argument("--predictions", type=Path, default=None, help="directory of <id>.rimg label grids to score instead")
    p.add_argument("--split", choices=("train", "val"), default="val", help="split to score")
    p.add_argument("--points", action="store_true", help="also score back-projected 3D points")
    p.add_argument("--workers", type=int, default=1, help="evaluation shards")

    p = sub.add_parser("infer", parents=[common], formatter_class=fmt, help="label a point cloud")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset directory (normalization stats, projection)")
    p.add_argument("--input", type=Path, required=True, help="point cloud .bin")

    p = sub.add_parser("render", parents=[common], formatter_class=fmt, help="color a range-image label plane as PPM")
    p.add_argument("--input", type=Path, required=True, help="range-image .rimg with a label plane")

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="time eval-mode inference")
    p.add_argument("--frames", type=int, default=10, help="frames to time")
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (default: fresh model)")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        overrides = json.loads(Path(args.config).read_text())
        known = vars(args)
        unknown = sorted(k for k in overrides if k.replace("-", "_") not in known or k in ("command", "config"))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        # command-line flags beat the config file: re-parse with config values as defaults
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def _projection(args) -> ProjectionConfig:
    return replace(ProjectionConfig(), width=args.width, height=args.height)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        num_classes=args.classes,
        depth_levels=args.depth_levels,
        base_features=args.base_features,
        input_height=args.height,
        input_width=args.width,
    )


def _class_names(k: int):
    return tuple(DEFAULT_CLASS_NAMES[:k]) + tuple(f"class{i}" for i in range(len(DEFAULT_CLASS_NAMES), k))


def colorize(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    rgb = np.empty(labels.shape + (3,), dtype=np.uint8)
    table = CLASS_COLORS
    if labels.max(initial=0) >= len(table):
        raise ValueError(f"no color for class {int(labels.max())}")
    rgb[:] = table[labels]
    rgb[np.asarray(mask) == 0] = INVALID_COLOR
    return rgb


def cmd_synth(args):
    args.out.mkdir(parents=True, exist_ok=True)
    base = SceneSpec(projection=_projection(args))
    for sid, spec in synthetic_sources(args.count, args.seed, base):
        cloud = generate_scene(spec)
        formats.write_point_cloud(cloud, args.out / f"{sid}.bin")
        formats.write_labels(cloud.labels, args.out / f"{sid}.label")
        print(f"wrote {args.out / (sid + '.bin')} ({len(cloud)} points)")


def cmd_project(args):
    cloud = formats.read_labeled_cloud(args.input)
    image = project(cloud, _projection(args))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{args.input.stem}.rimg"
    formats.write_range_image(Sample.from_range_image(args.input.stem, image), path)
    print(f"wrote {path} ({int(image.mask.sum())} valid pixels)")


def cmd_build_dataset(args):
    cfg = _projection(args)
    if args.synth is not None:
        sources = synthetic_sources(args.synth, args.seed, SceneSpec(projection=cfg))
    else:
        files = sorted(args.input.glob("*.bin"))
        if not files:
            raise ValueError(f"no .bin files in {args.input}")
        sources = [(f.stem, f) for f in files]
    manifest = build_dataset(
        sources,
        args.out,
        cfg,
        seed=args.seed,
        n_val=args.val,
        w0=args.w0,
        sigma=args.sigma,
        class_balance=not args.no_class_balance,
        class_names=_class_names(args.classes),
    )
    print(f"wrote {manifest.root / 'manifest.txt'}: {len(manifest.split_ids('train'))} train, {len(manifest.split_ids('val'))} val")


def cmd_train(args):
    manifest = load_manifest(args.data)
    if args.resume is not None:
        model, _ = load_weights(args.resume)
    else:
        model = UNetModel(_model_config(args), seed=args.seed)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        bn_momentum=args.bn_momentum,
        seed=args.seed,
        checkpoint_interval=args.checkpoint_interval,
        deterministic=args.deterministic,
        recalibrate_bn=not args.no_recalibrate_bn,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "train.log", "w") as log:
        report = train(model, manifest, cfg, out_dir=args.out, resume=args.resume, log=lambda line: print(line, file=log))
    sections = {"train": evaluate(model, manifest, "train", args.batch)}
    if manifest.split_ids("val"):
        sections["val"] = evaluate(model, manifest, "val", args.batch)
    write_metrics_file(args.out / "metrics.txt", sections, manifest.class_names)
    for name, m in sections.items():
        print(format_table(m, manifest.class_names, title=f"{name} IoU (%)"), end="")
    print(f"steps={report.steps} final_loss={report.epoch_losses[-1] if report.epoch_losses else float('nan'):.6f}")


def cmd_eval(args):
    manifest = load_manifest(args.data)
    sections = {}
    if args.predictions is not None:
        def pred(sid):
            return formats.read_range_image(args.predictions / f"{sid}.rimg").labels

        sections["pixel"] = evaluate_labels(manifest, args.split, pred)
    else:
        if args.checkpoint is None:
            raise ValueError("eval needs --checkpoint or --predictions")
        model, _ = load_weights(args.checkpoint)
        result = evaluate(model, manifest, args.split, args.batch, points=args.points, workers=args.workers)
        if args.points:
            sections["pixel"], sections["points"] = result.pixel, result.points
        else:
            sections["pixel"] = result
    args.out.mkdir(parents=True, exist_ok=True)
    write_metrics_file(args.out / "metrics.txt", sections, manifest.class_names)
    for name, m in sections.items():
        print(format_table(m, manifest.class_names, title=f"{name} IoU (%)"), end="")


def cmd_infer(args):
    manifest = load_manifest(args.data)
    model, _ = load_weights(args.checkpoint)
    cloud = formats.read_point_cloud(args.input)
    image = project(cloud, manifest.projection)
    x = normalize_channels(image, manifest.stats)[None]
    pred = model.predict(x)[0].astype(np.uint8)
    pred[image.mask == 0] = 0
    point_labels = backproject_labels(image, cloud, pred)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.input.stem
    image.labels = pred
    formats.write_range_image(Sample.from_range_image(stem, image), args.out / f"{stem}.rimg")
    formats.write_point_cloud(cloud, args.out / f"{stem}_labeled.bin")
    formats.write_labels(point_labels, args.out / f"{stem}_labeled.label")
    counts = np.bincount(point_labels, minlength=manifest.num_classes)
    print("points per class: " + ", ".join(f"{n}={c}" for n, c in zip(manifest.class_names, counts)))


def cmd_render(args):
    sample = formats.read_range_image(args.input)
    if sample.labels is None:
        raise ValueError(f"{args.input} has no label plane")
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{args.input.stem}.ppm"
    formats.write_ppm(colorize(sample.labels, sample.mask), path)
    print(f"wrote {path}")


def cmd_bench(args):
    if args.checkpoint is not None:
        model, _ = load_weights(args.checkpoint)
    else:
        model = UNetModel(_model_config(args), seed=args.seed)
    report = benchmark_inference(model, args.frames, seed=args.seed)
    print(report)
    args.out.mkdir(parents=True, exist_ok=True)
    formats.atomic_write(
        args.out / "bench.txt",
        f"frames = {report.frames}\nelapsed_s = {report.elapsed!r}\nfps = {report.fps!r}\n".encode(),
    )


HANDLERS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "render": cmd_render,
    "bench": cmd_bench,
}


def _snapshot(root: Path) -> set:
    return set(root.rglob("*")) if root.exists() else set()


def _remove_new(root: Path, before: set, root_existed: bool) -> None:
    if not root_existed:
        shutil.rmtree(root, ignore_errors=True)
        return
    new = sorted(_snapshot(root) - before, key=lambda p: len(p.parts), reverse=True)
    for path in new:
        if path.is_dir():
            shutil.rmtree(path, ignore_errors=True)
        elif path.exists():
            path.unlink()


def main(argv=None) -> int:
    args = parse_args(argv)
    print(f"command = {args.command}")
    for key, value in sorted(vars(args).items()):
        if key != "command":
            print(f"config.{key} = {value}")
    sys.stdout.flush()
    if args.deterministic:
        tensor.set_deterministic(True)
    out = args.out
    existed = out.exists()
    before = _snapshot(out)
    try:
        HANDLERS[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        _remove_new(out, before, existed)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
