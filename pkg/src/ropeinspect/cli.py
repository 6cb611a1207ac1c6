"""Rope inspection commands: train, evaluate, infer, re-parameterize, augment.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments / config / inputs,
3 unreadable or corrupted checkpoint.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import warnings
from pathlib import Path

import numpy as np

logger = logging.getLogger("ropeinspect")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CKPT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="random seed")
    p.add_argument("--config", default=d(None), help="JSON config file")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="force deterministic torch kernels")
    p.add_argument("--workers", type=int, default=d(1), help="loader worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropeinspect", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a segmentation or detection model")
    p.add_argument("--task", choices=("seg", "det"))
    p.add_argument("--out", help="output directory (overrides config output_dir)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--task", choices=("seg", "det"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", help="directory for report.json / per_image.csv / figures")
    p.add_argument("--seg-ckpt", help="det only: also classify from segmentation-derived masks")
    p.add_argument("--input-size", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-speed", action="store_true", help="skip the FPS measurement")

    p = sub.add_parser("infer", parents=[common], help="segment, extract and classify images")
    p.add_argument("--seg-ckpt", required=True)
    p.add_argument("--det-ckpt", required=True)
    p.add_argument("--input", required=True, help="dataset directory or folder of images")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pad-frac", type=float)
    p.add_argument("--det-size", type=int)
    p.add_argument("--seg-size", type=int)
    p.add_argument("--use-gt-masks", action="store_true",
                   help="replace segmentation output with the manifest masks")

    p = sub.add_parser("reparam", parents=[common], help="fuse a multi-branch detection checkpoint")
    p.add_argument("--ckpt-in", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--size", type=int, default=224, help="input size for the deviation check")

    p = sub.add_parser("augment", parents=[common], help="background-augment a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic rope dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", choices=("train", "test"), default="train")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        import torch
        torch.use_deterministic_algorithms(True, warn_only=True)
    from .checkpoint import CheckpointError
    from .data import DatasetError
    from .train import ConfigError

    handler = globals()[f"cmd_{args.command}"]
    try:
        return handler(args) or EXIT_OK
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except (UsageError, ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def _manifest(path):
    from .data import DatasetManifest
    path = Path(path)
    target = path / "manifest.json" if path.is_dir() else path
    if not target.is_file():
        raise UsageError(f"no dataset manifest at {target}")
    return DatasetManifest.load(target)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import load_seg_dataset
    from .train import ConfigError, TrainConfig, train_detection, train_segmentation

    if not args.config:
        raise UsageError("train needs --config")
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config not found: {cfg_path}")
    cfg = TrainConfig.from_json(cfg_path)
    if args.task and args.task != cfg.task:
        raise ConfigError(f"--task {args.task} but config task is {cfg.task}")
    if args.seed is not None:
        cfg.seed = args.seed
    if not cfg.train_manifest:
        raise ConfigError("config needs 'train_manifest'")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else cfg_path.parent / p

    train_set = load_seg_dataset(_manifest(resolve(cfg.train_manifest)), workers=args.workers)
    val_set = None
    if cfg.val_manifest:
        val_set = load_seg_dataset(_manifest(resolve(cfg.val_manifest)), workers=args.workers)
    out = Path(args.out) if args.out else resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    fn = train_segmentation if cfg.task == "seg" else train_detection
    result = fn(cfg, train_set, val=val_set, out_dir=out)
    print(json.dumps({"checkpoint": str(result.checkpoint),
                      "best_checkpoint": str(result.best_checkpoint),
                      "best_metric": result.best_metric,
                      "epochs": len(result.history),
                      "final_loss": result.history[-1]["loss"]}))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .data import load_seg_dataset
    from .metrics import DET_FIELDS, SEG_FIELDS, write_csv
    from .plotting import plot_confusion, plot_score_bars
    from .train import evaluate

    model, meta = load_checkpoint(args.ckpt)
    if meta["task"] != args.task:
        raise CheckpointError(f"checkpoint holds a {meta['task']!r} model but --task is {args.task!r}")
    manifest = _manifest(args.dataset)
    samples = load_seg_dataset(manifest, workers=args.workers)
    if not samples:
        raise UsageError("dataset is empty")
    if args.task == "det" and any(s.label is None for s in samples):
        raise UsageError("det evaluation needs labelled entries")
    size = args.input_size or meta["extra"].get("input_size")
    pad = meta["extra"].get("pad_frac", 0.05)
    rows = []
    report = evaluate(model, samples, args.task, input_size=size, measure_speed=not args.no_speed,
                      seg_checkpoint=args.seg_ckpt, threshold=args.threshold, pad_frac=pad,
                      per_image=rows)
    doc = report.to_dict()
    print(json.dumps(doc, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", doc)
        write_csv(out / "per_image.csv", rows)
        plot_score_bars(doc, out / "scores.png", SEG_FIELDS if args.task == "seg" else DET_FIELDS)
        if args.task == "det":
            plot_confusion([r["pred"] for r in rows], [r["label"] for r in rows], out / "confusion.png")
    return EXIT_OK


# -- infer --------------------------------------------------------------------

def _infer_inputs(path: Path):
    """Yield ``(id, loader)`` pairs; loaders return a RopeSample or raise."""
    from .data import RopeSample, read_color, read_depth, read_mask

    if (path / "manifest.json").is_file():
        m = _manifest(path)

        def make(e):
            def load():
                color = read_color(m.root / e.color)
                depth = read_depth(m.root / e.depth) if e.depth else None
                mask_path = m.root / e.mask
                mask = read_mask(mask_path) if mask_path.is_file() else np.zeros(color.shape[:2], np.uint8)
                return RopeSample(color=color, depth=depth, gt_mask=mask, id=e.id, label=e.label)
            return load
        return [(e.id, make(e)) for e in m.entries], True

    color_dir = path / "color" if (path / "color").is_dir() else path
    files = sorted(p for p in color_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))

    def make_file(p):
        def load():
            color = read_color(p)
            dpath = path / "depth" / f"{p.stem}.png"
            depth = read_depth(dpath) if dpath.is_file() else None
            return RopeSample(color=color, depth=depth, gt_mask=np.zeros(color.shape[:2], np.uint8), id=p.stem)
        return load
    return [(p.stem, make_file(p)) for p in files], False


def cmd_infer(args) -> int:
    import cv2

    from .checkpoint import load_checkpoint
    from .data import write_color, write_mask
    from .metrics import MetricsReport, aggregate_seg, classification_metrics, seg_scores
    from .pipeline import NO_ROPE, overlay, run_pipeline

    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    seg_model, seg_meta = load_checkpoint(args.seg_ckpt, task="seg")
    det_model, det_meta = load_checkpoint(args.det_ckpt, task="det")
    det_size = args.det_size or det_meta["extra"].get("input_size", 224)
    seg_size = args.seg_size or seg_meta["extra"].get("input_size")
    pad = args.pad_frac if args.pad_frac is not None else det_meta["extra"].get("pad_frac", 0.05)
    in_dir, out = Path(args.input), Path(args.out)
    if not in_dir.is_dir():
        raise UsageError(f"input directory not found: {in_dir}")
    inputs, has_gt = _infer_inputs(in_dir)
    if args.use_gt_masks and not has_gt:
        raise UsageError("--use-gt-masks needs a dataset directory with a manifest")
    for sub in ("saliency", "masks", "overlays", "extracted"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    entries, seg_rows, det_pairs = [], [], []
    for sid, load in inputs:
        try:
            sample = load()
            res = run_pipeline(seg_model, det_model, sample, args.threshold, pad, det_size,
                               seg_input_size=seg_size,
                               mask=sample.gt_mask if args.use_gt_masks else None)
            sal_path = out / "saliency" / f"{sid}.png"
            cv2.imwrite(str(sal_path), np.rint(res.saliency * 255).astype(np.uint8))
            mask_path = out / "masks" / f"{sid}.png"
            write_mask(mask_path, res.mask)
            ov_path = out / "overlays" / f"{sid}.png"
            write_color(ov_path, overlay(sample.color, res.saliency))
            ext_path = None
            if res.extracted is not None:
                ext_path = out / "extracted" / f"{sid}.png"
                write_color(ext_path, res.extracted)
            entries.append({"id": sid, "status": "ok", "label": res.label,
                            "confidence": res.confidence,
                            "saliency": str(sal_path.relative_to(out)),
                            "mask": str(mask_path.relative_to(out)),
                            "overlay": str(ov_path.relative_to(out)),
                            "extracted": None if ext_path is None else str(ext_path.relative_to(out))})
            if has_gt and sample.gt_mask.any():
                seg_rows.append(seg_scores(res.saliency, sample.gt_mask))
            if sample.label is not None:
                det_pairs.append((res.label, sample.label))
        except Exception as exc:  # noqa: BLE001 - per-image failures are recorded
            logger.warning("image %s failed: %s", sid, exc)
            entries.append({"id": sid, "status": "error", "error": str(exc)})

    counts = {}
    for e in entries:
        if e["status"] == "ok":
            counts[e["label"]] = counts.get(e["label"], 0) + 1
    summary_metrics = None
    if seg_rows or det_pairs:
        rep = aggregate_seg(seg_rows) if seg_rows and not args.use_gt_masks else MetricsReport()
        if det_pairs:
            rep.accuracy, rep.f_beta_cls = classification_metrics(*zip(*det_pairs))
            rep.extra["no_rope_found"] = sum(p == NO_ROPE for p, _ in det_pairs)
        rep.n_images = len(entries)
        summary_metrics = rep.to_dict()
    doc = {"threshold": args.threshold, "images": entries,
           "summary": {"n_images": len(entries),
                       "n_errors": sum(e["status"] == "error" for e in entries),
                       "counts": counts, "metrics": summary_metrics}}
    _write_json(out / "report.json", doc)
    print(json.dumps(doc["summary"], indent=2))
    return EXIT_OK


# -- reparam ------------------------------------------------------------------

def cmd_reparam(args) -> int:
    import torch

    from .checkpoint import load_checkpoint, save_checkpoint
    from .detmodel import reparameterize_model
    from .metrics import count_params

    src = Path(args.ckpt_in)
    if not src.is_file():
        raise UsageError(f"checkpoint not found: {src}")
    model, meta = load_checkpoint(src, task="det")
    before = count_params(model)[0]
    if meta["fused"] or not any(u.fusable for u in model.rep_units()):
        warnings.warn(f"{src} is already fused; copying through", stacklevel=1)
        print(f"warning: {src} is already fused; copying through", file=sys.stderr)
        Path(args.ckpt_out).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, args.ckpt_out)
        print(json.dumps({"params_before": before, "params_after": before,
                          "max_abs_deviation": 0.0, "already_fused": True}))
        return EXIT_OK
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else 0)
    x = torch.randn(10, 3, args.size, args.size, generator=gen)
    with torch.no_grad():
        y0 = model(x)
        reparameterize_model(model)
        y1 = model(x)
    dev = float((y0 - y1).abs().max())
    after = count_params(model)[0]
    save_checkpoint(args.ckpt_out, model, extra={**meta["extra"], "reparam_max_abs_deviation": dev})
    print(json.dumps({"params_before": before, "params_after": after,
                      "max_abs_deviation": dev, "already_fused": False}))
    return EXIT_OK


# -- augment ------------------------------------------------------------------

def cmd_augment(args) -> int:
    from .augment import augment_directory

    if not 0.0 < args.fraction <= 1.0:
        raise UsageError("--fraction must lie in (0, 1]")
    bg = Path(args.backgrounds)
    if not bg.is_dir():
        raise UsageError(f"background folder not found: {bg}")
    manifest = _manifest(args.dataset)
    try:
        new_manifest, prov = augment_directory(manifest, bg, args.fraction,
                                               args.seed if args.seed is not None else 0, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({"source": len(manifest), "generated": len(prov), "total": len(new_manifest)}))
    return EXIT_OK


# -- fixture ------------------------------------------------------------------

def cmd_fixture(args) -> int:
    from .data import generate_fixture, save_dataset

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.size % 16:
        raise UsageError("--size must be a multiple of 16")
    samples = generate_fixture(args.seed if args.seed is not None else 0, args.n, args.size)
    m = save_dataset(samples, args.out, split=args.split)
    print(json.dumps({"root": str(m.root), "n": len(m)}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
