"""Command-line entry point: generate-data, train, detect, eval, benchmark.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .boxes import AnchorConfig, Box
from .checkpoint import Checkpoint, load_checkpoint
from .data import (load_manifest, prepare_input, rescale_box, save_manifest,
                   split)
from .errors import MiniRcnnError, NumericError
from .evaluation import benchmark_latency, evaluate_model
from .model import DetectorConfig, detect
from .ppm import load_ppm, save_ppm
from .synthetic import (BACKGROUNDS, SyntheticSceneSpec, default_classes,
                        generate_synthetic)
from .training import TrainConfig, save_loss_csv, train_loop


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors (2 is for data errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="minircnn",
                     description="Two-stage object detection at desk scale: "
                                 "synthetic data, training, detection, "
                                 "evaluation and latency benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="render synthetic scenes + manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--classes", type=int, default=3,
                   help="number of shape classes (1..12)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--background", choices=BACKGROUNDS, default="varied")
    p.add_argument("--shapes-min", type=int, default=1)
    p.add_argument("--shapes-max", type=int, default=2)
    p.add_argument("--occlusion", type=float, default=0.2,
                   help="probability a shape may overlap or get truncated")
    p.add_argument("--split-ratio", type=float, default=0.8,
                   help="train fraction written into the manifest")

    p = sub.add_parser("train", help="train a detector from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--anchor-scales", type=float, nargs="+",
                   default=[0.25, 0.5, 1.0, 2.0])
    p.add_argument("--anchor-ratios", type=float, nargs="+",
                   default=[0.5, 1.0, 2.0])
    p.add_argument("--anchor-base-size", type=float, default=64.0)
    p.add_argument("--rpn-batch", type=int, default=256)
    p.add_argument("--head-batch", type=int, default=32)
    p.add_argument("--stop-loss", type=float, default=0.0,
                   help="stop once the trailing-window mean drops below this")
    p.add_argument("--stop-window", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--loss-csv", default=None,
                   help="loss history CSV path (default: <out>.loss.csv)")
    p.add_argument("--quiet", action="store_true", help="suppress per-step lines")

    p = sub.add_parser("detect", help="run detection on one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="confidence cutoff (default 0.5)")
    p.add_argument("--annotate", default=None,
                   help="write a copy of the image with 2-px box overlays")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--tsv", action="store_true", help="emit TSV instead of text")

    p = sub.add_parser("benchmark", help="time repeated detection on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate_data(args) -> int:
    spec = SyntheticSceneSpec(
        width=args.image_size, height=args.image_size,
        background=args.background, classes=default_classes(args.classes),
        shapes_per_image=(args.shapes_min, args.shapes_max),
        occlusion_prob=args.occlusion)
    manifest = generate_synthetic(spec, args.images, args.seed, args.out)
    manifest = split(manifest, args.split_ratio, args.seed)
    save_manifest(manifest, Path(args.out) / "manifest.tsv")
    print(f"wrote {args.images} images and manifest.tsv to {args.out} "
          f"({len(manifest.train_records)} train / {len(manifest.test_records)} test)")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = TrainConfig(
        iterations=args.iterations, learning_rate=args.learning_rate,
        momentum=args.momentum, weight_decay=args.weight_decay,
        seed=args.seed, image_size=args.image_size,
        rpn_batch=args.rpn_batch, head_batch=args.head_batch,
        stop_loss=args.stop_loss, stop_window=args.stop_window,
        checkpoint_every=args.checkpoint_every)
    anchors = AnchorConfig(scales=tuple(args.anchor_scales),
                           ratios=tuple(args.anchor_ratios),
                           base_size=args.anchor_base_size)

    def log(it, b):
        print(f"step {it} rpn_cls={b.rpn_cls:.4f} rpn_reg={b.rpn_reg:.4f} "
              f"head_cls={b.head_cls:.4f} head_reg={b.head_reg:.4f} "
              f"total={b.total:.4f}")

    result = train_loop(manifest, cfg, anchors=anchors,
                        checkpoint_path=args.out,
                        log=None if args.quiet else log)
    csv_path = args.loss_csv if args.loss_csv else f"{args.out}.loss.csv"
    save_loss_csv(result.history, csv_path)
    print(f"checkpoint: {args.out}")
    print(f"loss csv: {csv_path}")
    if len(result.history):
        print(f"final total loss: {result.history[-1, 4]:.5f} "
              f"after {result.checkpoint.iteration} iterations")
    return 0


def _load_model(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    return ckpt, ckpt.build_model()


def _prepared(ckpt: Checkpoint, model, image_path):
    raw = load_ppm(image_path)
    _, h, w = raw.shape
    size = ckpt.image_size
    return raw, prepare_input(raw, size, size, stride=model.stride), w, h


def draw_box(arr: np.ndarray, box: Box, rgb=(1.0, 1.0, 1.0), thickness: int = 2) -> None:
    """Paint a rectangle outline in place on a (3, H, W) image in [0, 1]."""
    _, h, w = arr.shape
    x0 = int(np.clip(np.floor(box.xmin), 0, w - 1))
    y0 = int(np.clip(np.floor(box.ymin), 0, h - 1))
    x1 = int(np.clip(np.ceil(box.xmax), x0 + 1, w))
    y1 = int(np.clip(np.ceil(box.ymax), y0 + 1, h))
    t = max(1, thickness)
    color = np.array(rgb)[:, None, None]
    arr[:, y0:min(y0 + t, y1), x0:x1] = color
    arr[:, max(y1 - t, y0):y1, x0:x1] = color
    arr[:, y0:y1, x0:min(x0 + t, x1)] = color
    arr[:, y0:y1, max(x1 - t, x0):x1] = color


def _cmd_detect(args) -> int:
    ckpt, model = _load_model(args.ckpt)
    raw, prepared, w, h = _prepared(ckpt, model, args.image)
    cfg = DetectorConfig() if args.threshold is None else \
        DetectorConfig(confidence_threshold=args.threshold)
    dets = detect(prepared, model, cfg)
    sx, sy = w / ckpt.image_size, h / ckpt.image_size
    mapped = [(d, rescale_box(d.box, sx, sy)) for d in dets]
    for d, b in mapped:
        name = ckpt.classes[d.class_id]
        print(f"{name}\t{d.confidence:.6f}\t{b.xmin:.1f} {b.ymin:.1f} "
              f"{b.xmax:.1f} {b.ymax:.1f}")
    if args.annotate:
        canvas = raw.numpy()
        for _, b in mapped:
            draw_box(canvas, b)
        save_ppm(canvas, args.annotate)
    return 0


def _eval_samples(ckpt: Checkpoint, model, manifest):
    records = manifest.test_records if manifest.split is not None \
        else manifest.annotations
    size = ckpt.image_size
    lookup = {name: i for i, name in enumerate(ckpt.classes)}
    samples = []
    for ann in records:
        raw = load_ppm(manifest.image_path(ann))
        _, h, w = raw.shape
        prepared = prepare_input(raw, size, size, stride=model.stride)
        sx, sy = size / w, size / h
        gt = [(lookup[name], rescale_box(b, sx, sy)) for name, b in ann.boxes]
        samples.append((prepared, gt))
    return samples


def _cmd_eval(args) -> int:
    ckpt, model = _load_model(args.ckpt)
    manifest = load_manifest(args.manifest)
    unknown = set(manifest.classes) - set(ckpt.classes)
    if unknown:
        raise MiniRcnnError(f"manifest classes {sorted(unknown)} not in checkpoint")
    samples = _eval_samples(ckpt, model, manifest)
    cfg = DetectorConfig() if args.threshold is None else \
        DetectorConfig(confidence_threshold=args.threshold)
    report = evaluate_model(model, samples, ckpt.classes, det_cfg=cfg,
                            iou_min=args.iou)
    print(report.to_tsv() if args.tsv else report.to_text())
    return 0


def _cmd_benchmark(args) -> int:
    ckpt, model = _load_model(args.ckpt)
    _, prepared, _, _ = _prepared(ckpt, model, args.image)
    report = benchmark_latency(model, prepared, warmup=args.warmup, runs=args.runs)
    print(report.to_tsv())
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "benchmark": _cmd_benchmark,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"minircnn: numeric failure: {exc}", file=sys.stderr)
        return 3
    except MiniRcnnError as exc:
        print(f"minircnn: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"minircnn: i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
