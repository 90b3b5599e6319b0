"""``htc`` command line: gen, train, eval, infer, ablate.

Machine-readable output goes to stdout or files; progress goes to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .config import RunConfig, TrainConfig, config_hash
from .dataset import DIFFICULTIES, THING_CLASSES, generate_dataset, read_coco_json, write_coco_json
from .evalkit import results_from_arrays

CLASS_COLOURS = ((230, 60, 60), (60, 170, 230), (240, 200, 40))


class UsageError(Exception):
    pass


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _positive_multiple_of_32(text: str) -> int:
    value = int(text)
    if value <= 0 or value % 32:
        raise argparse.ArgumentTypeError(f"--size must be a positive multiple of 32, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    for split, n, seed in (("train", args.n_train, 2 * args.seed), ("val", args.n_val, 2 * args.seed + 1)):
        samples = generate_dataset(n, seed, image_size=args.size, difficulty=args.difficulty)
        info = {"split": split, "seed": args.seed, "image_size": args.size, "difficulty": args.difficulty, "generator_version": __version__}
        write_coco_json(samples, out / split, info=info)
        _progress(f"wrote {n} {split} images to {out / split}")
    return 0


def _load_run(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    if args.data:
        updates["train_data"] = str(args.data)
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.epochs is not None:
        updates["train"] = TrainConfig(**{**run.train.model_dump(), "epochs": args.epochs})
    if updates:
        run = RunConfig(**{**run.model_dump(), **updates})
    return run


def cmd_train(args) -> int:
    from .train import checkpoint_dirs, train

    run = _load_run(args)
    if not run.train_data:
        raise UsageError("no training data: pass --data or set train_data in the config")
    samples = read_coco_json(run.train_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.dump(out / "run_config.json")
    train(run, samples, out, resume=args.resume, progress=_progress)
    summary = {"checkpoint": str(checkpoint_dirs(out)[-1]), "config_hash": config_hash(run.pipeline), "seed": run.seed, "variant": run.pipeline.variant_name()}
    print(_dump(summary))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_detections, run_detection
    from .train import load_model, resolve_checkpoint

    requested = RunConfig.load(args.config).pipeline if args.config else None
    ckpt_path = resolve_checkpoint(args.checkpoint)
    model, ckpt = load_model(ckpt_path, requested)
    samples = read_coco_json(args.data)
    if not samples:
        raise ValueError(f"no images in {args.data}")
    _progress(f"evaluating {ckpt_path} on {len(samples)} images")
    dets = run_detection(model, samples)
    stages = {f"stage {t + 1}": evaluate_detections(samples, dets, stage=t).as_dict() for t in range(model.cfg.num_stages)}
    segm = evaluate_detections(samples, dets, iou_type="segm").as_dict()
    stages[f"stage 1~{model.cfg.num_stages}"] = segm
    report = {
        "checkpoint": str(ckpt_path),
        "config_hash": ckpt["config_hash"],
        "seed": ckpt["extra"]["seed"],
        "data": str(args.data),
        "bbox": evaluate_detections(samples, dets, iou_type="bbox").as_dict(),
        "segm": segm,
        "segm_per_stage": stages,
    }
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _overlay(image: np.ndarray, det, keep: np.ndarray) -> Image.Image:
    rgb = image.transpose(1, 2, 0).astype(np.float64) * 255
    masks = det.masks()
    for k in np.nonzero(keep)[0]:
        colour = np.array(CLASS_COLOURS[(det.labels[k] - 1) % len(CLASS_COLOURS)], dtype=np.float64)
        m = masks[k].astype(bool)
        rgb[m] = 0.55 * rgb[m] + 0.45 * colour
    pil = Image.fromarray(np.clip(np.round(rgb), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(pil)
    for k in np.nonzero(keep)[0]:
        colour = CLASS_COLOURS[(det.labels[k] - 1) % len(CLASS_COLOURS)]
        x1, y1, x2, y2 = det.boxes[k]
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=colour)
        draw.text((x1 + 1, y1 + 1), f"{THING_CLASSES[det.labels[k] - 1]} {det.scores[k]:.2f}", fill=colour)
    return pil


def cmd_infer(args) -> int:
    from .proposals import dense_proposals
    from .train import load_model

    model, ckpt = load_model(args.checkpoint)
    path = Path(args.image)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    image = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    h, w = image.shape[1:]
    ph, pw = -(-h // 32) * 32, -(-w // 32) * 32
    padded = np.zeros((3, ph, pw), dtype=np.float32)
    padded[:, :h, :w] = image
    proposals = dense_proposals((h, w))
    (det,) = model.predict(padded[None], [proposals])
    det.image_size = (ph, pw)
    masks = det.masks()[:, :h, :w]
    keep = det.scores >= args.min_score
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overlay = _overlay(padded, det, keep).crop((0, 0, w, h))
    overlay.save(out / "overlay.png")
    results = results_from_arrays(0, det.boxes[keep], det.labels[keep], det.scores[keep], masks[keep])
    doc = {"image": str(path), "config_hash": ckpt["config_hash"], "seed": ckpt["extra"]["seed"], "min_score": args.min_score, "detections": results}
    (out / "results.json").write_text(_dump(doc) + "\n")
    print(_dump({"overlay": str(out / "overlay.png"), "results": str(out / "results.json"), "detections": int(keep.sum())}))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation

    data = Path(args.data)
    train_samples = read_coco_json(data / "train")
    val_samples = read_coco_json(data / "val")
    if args.n_train is not None:
        train_samples = train_samples[: args.n_train]
    if args.n_val is not None:
        val_samples = val_samples[: args.n_val]
    base_run = RunConfig.load(args.config) if args.config else RunConfig()
    tcfg = base_run.train
    if args.epochs is not None:
        tcfg = TrainConfig(**{**tcfg.model_dump(), "epochs": args.epochs})
    out = Path(args.out)
    report = run_ablation(train_samples, val_samples, args.seeds, out / "runs", args.axis, tcfg, base_run.pipeline, _progress)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(_dump(report) + "\n")
    table = format_table(report)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htc", description="Desk-scale hybrid task cascade for instance segmentation.")
    parser.add_argument("--version", action="version", version=f"htc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic train/val dataset")
    p.add_argument("--out", required=True, help="output directory; train/ and val/ are created inside")
    p.add_argument("--n-train", type=_non_negative, default=200, help="number of training images (default 200)")
    p.add_argument("--n-val", type=_non_negative, default=50, help="number of validation images (default 50)")
    p.add_argument("--size", type=_positive_multiple_of_32, default=128, help="image side in pixels, multiple of 32 (default 128)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.add_argument("--difficulty", choices=DIFFICULTIES, default="easy", help="easy: no overlap; hard: occlusion and more clutter")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a pipeline from a run config")
    p.add_argument("--config", help="RunConfig JSON (defaults to the full HTC pipeline)")
    p.add_argument("--data", help="training split directory (overrides train_data in the config)")
    p.add_argument("--out", required=True, help="directory for checkpoints and metrics.jsonl")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="box and mask AP of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory, or a training output directory (newest checkpoint)")
    p.add_argument("--data", required=True, help="dataset split directory with annotations.json")
    p.add_argument("--config", help="RunConfig JSON whose pipeline must match the checkpoint")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="detect and segment one image; writes an overlay PNG and results JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PNG/JPEG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-score", type=float, default=0.5, help="score cut for drawn and reported detections (default 0.5)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train pipeline variants under one budget and tabulate AP")
    p.add_argument("--data", required=True, help="dataset root with train/ and val/")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="training seeds (default 0)")
    p.add_argument("--axis", choices=("components", "fusion", "beta"), default="components", help="which family of variants to compare")
    p.add_argument("--config", help="RunConfig JSON supplying the base pipeline and schedule")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--n-train", type=int, help="use only the first N training images")
    p.add_argument("--n-val", type=int, help="use only the first N validation images")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"htc {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError, FloatingPointError) as e:
        print(f"htc {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
