"""Training loops, schedules, configuration and evaluation for both models."""
from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .augment import train_transforms_det, train_transforms_seg
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LABELS, DetectSample, RopeSample, extract_foreground
from .detmodel import VovNet, VovNetConfig, build_detmodel, to_det_tensor
from .pipeline import classify, predict_saliency, resize_for_model, run_pipeline
from .segmodel import RGBDUNet, UNetConfig, build_segmodel, to_color_tensor, to_depth_tensor

logger = logging.getLogger(__name__)

TASKS = ("seg", "det")
_TASK_DEFAULTS = {
    "seg": {"batch_size": 12, "scheduler": "step", "epochs": 200, "input_size": 320},
    "det": {"batch_size": 16, "scheduler": "cosine", "epochs": 150, "input_size": 224},
}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    output_dir: str = "runs/default"
    batch_size: Optional[int] = None
    lr_init: float = 5e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-2
    scheduler: Optional[str] = None
    step_period: int = 50
    step_factor: float = 0.5
    epochs: Optional[int] = None
    max_iters: Optional[int] = None
    seed: int = 0
    input_size: Optional[int] = None
    crop_size: Optional[int] = None
    augment: bool = True
    pad_frac: float = 0.05
    deterministic: bool = True
    val_every: int = 1
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        for k, v in _TASK_DEFAULTS[self.task].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if self.task == "seg" and self.crop_size is None:
            # 320 -> 288: 90% of the side, kept divisible by 16
            self.crop_size = max(16, (self.input_size * 9 // 10) // 16 * 16)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr_init:
            raise ConfigError("need 0 < lr_min <= lr_init")
        if self.scheduler not in ("step", "cosine"):
            raise ConfigError("scheduler must be 'step' or 'cosine'")
        if self.epochs < 1 or self.step_period < 1 or self.val_every < 1:
            raise ConfigError("epochs, step_period and val_every must be >= 1")
        if self.crop_size is not None and self.crop_size > self.input_size:
            raise ConfigError("crop_size cannot exceed input_size")
        if not 0.0 <= self.pad_frac <= 0.5:
            raise ConfigError("pad_frac must lie in [0, 0.5]")
        try:
            self.model_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid model section: {exc}") from exc

    def model_config(self):
        if self.task == "seg":
            return UNetConfig.from_dict(self.model)
        return VovNetConfig.from_dict(self.model)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "task" not in d:
            raise ConfigError("config needs a 'task' key")
        expected = {"batch_size": int, "epochs": int, "max_iters": int, "seed": int,
                    "input_size": int, "crop_size": int, "step_period": int, "val_every": int,
                    "lr_init": (int, float), "lr_min": (int, float), "weight_decay": (int, float),
                    "step_factor": (int, float), "pad_frac": (int, float),
                    "augment": bool, "deterministic": bool, "model": dict,
                    "task": str, "scheduler": str, "output_dir": str,
                    "train_manifest": str, "val_manifest": str}
        for k, v in d.items():
            if v is None:
                continue
            t = expected[k]
            bad = isinstance(v, bool) and t in (int, (int, float))
            if bad or not isinstance(v, t):
                raise ConfigError(f"config key {k!r} has the wrong type ({type(v).__name__})")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- schedules ----------------------------------------------------------------

def step_lr(epoch: int, lr_init: float = 5e-4, period: int = 50, factor: float = 0.5) -> float:
    return lr_init * factor ** (epoch // period)


def cosine_lr(t: float, total: float, lr_max: float = 5e-4, lr_min: float = 1e-6) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2``."""
    if total <= 0:
        return lr_max
    return lr_min + (lr_max - lr_min) * (1 + math.cos(math.pi * t / total)) / 2


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler == "step":
        return step_lr(epoch, cfg.lr_init, cfg.step_period, cfg.step_factor)
    return cosine_lr(epoch, cfg.epochs - 1, cfg.lr_init, cfg.lr_min)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


# -- batches ------------------------------------------------------------------

def _fit_seg_sample(s: RopeSample, size: int) -> RopeSample:
    if s.gt_mask.shape == (size, size):
        return s
    return RopeSample(
        color=resize_for_model(s.color, size),
        depth=None if s.depth is None else resize_for_model(s.depth, size, nearest=True),
        gt_mask=resize_for_model(s.gt_mask, size, nearest=True),
        id=s.id, label=s.label,
    )


def seg_batch(samples: Sequence[RopeSample]):
    color = to_color_tensor(np.stack([s.color for s in samples]))
    h, w = samples[0].gt_mask.shape
    depth = to_depth_tensor([s.depth for s in samples], shape=(h, w))
    mask = torch.from_numpy(np.stack([s.gt_mask for s in samples]).astype(np.float32))[:, None]
    return color, depth, mask


def det_batch(images, labels):
    x = to_det_tensor(np.stack(images))
    y = torch.tensor([LABELS.index(lab) for lab in labels], dtype=torch.long)
    return x, y


def _write_history(path: Path, rows: list[dict]) -> None:
    metrics.write_csv(path, rows)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict]
    checkpoint: Optional[Path]
    best_checkpoint: Optional[Path]
    best_metric: float


def _make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_init, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _extra(cfg: TrainConfig, **kw) -> dict:
    return {"seed": cfg.seed, "input_size": cfg.input_size, "pad_frac": cfg.pad_frac,
            "train_config": cfg.to_dict(), **kw}


def _finish(cfg, model, history, best_path, best, out_dir, name):
    last = None
    if out_dir is not None:
        last = save_checkpoint(out_dir / f"{name}_last.pt", model,
                               extra=_extra(cfg, epoch=history[-1]["epoch"] if history else None))
        _write_history(out_dir / "history.csv", history)
        from .plotting import plot_history
        plot_history(history, out_dir / "history.png")
    return TrainResult(model, history, last, best_path, best)


def seg_val_maxf(model: RGBDUNet, samples: Sequence[RopeSample], input_size: int) -> float:
    scores = []
    for s in samples:
        sal = predict_saliency(model, s, input_size)
        scores.append(metrics.f_measure_curve(sal, s.gt_mask)[1])
    return float(np.mean(scores))


def train_segmentation(cfg: TrainConfig, dataset: Sequence[RopeSample],
                       val: Optional[Sequence[RopeSample]] = None,
                       out_dir=None, model: Optional[RGBDUNet] = None) -> TrainResult:
    """Minimize per-pixel BCE with AdamW and a step schedule.

    History has one row per epoch; the best-by-MaxF model is checkpointed.
    """
    if not dataset:
        raise ValueError("empty training set")
    seed_everything(cfg.seed, cfg.deterministic)
    out_dir = Path(out_dir) if out_dir is not None else None
    model = model or build_segmodel(cfg.model_config())
    opt = _make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    samples = [_fit_seg_sample(s, cfg.input_size) for s in dataset]
    val = [_fit_seg_sample(s, cfg.input_size) for s in (val if val is not None else dataset)]
    history, best, best_path, step = [], -1.0, None, 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        _set_lr(opt, lr)
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [samples[j] for j in order[i:i + cfg.batch_size]]
            if cfg.augment:
                seeds = rng.integers(2**31, size=len(batch))
                batch = [train_transforms_seg(s, int(sd), crop=cfg.crop_size) for s, sd in zip(batch, seeds)]
            color, depth, mask = seg_batch(batch)
            pred = model(color, depth)
            if not torch.isfinite(pred).all():
                raise TrainingDiverged(f"non-finite prediction at epoch {epoch}, step {step}")
            loss = F.binary_cross_entropy(pred, mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
            if cfg.max_iters is not None and step >= cfg.max_iters:
                break
        row = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)), "val_maxf": ""}
        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_iters is not None and step >= cfg.max_iters)
        if (epoch + 1) % cfg.val_every == 0 or last_epoch:
            maxf = seg_val_maxf(model, val, cfg.input_size)
            row["val_maxf"] = maxf
            if maxf > best:
                best = maxf
                if out_dir is not None:
                    best_path = save_checkpoint(out_dir / "seg_best.pt", model,
                                                extra=_extra(cfg, epoch=epoch, val_maxf=maxf))
        history.append(row)
        logger.info("seg epoch %d lr %.3g loss %.4f val_maxf %s", epoch, lr, row["loss"], row["val_maxf"])
        if last_epoch:
            break
    return _finish(cfg, model, history, best_path, best, out_dir, "seg")


def _det_images(dataset, cfg: TrainConfig) -> tuple[list[np.ndarray], list[str]]:
    images, labels = [], []
    for s in dataset:
        if isinstance(s, RopeSample):
            img = extract_foreground(s.color, s.gt_mask, cfg.pad_frac, cfg.input_size)
        else:
            img = resize_for_model(s.image, cfg.input_size)
        images.append(img)
        labels.append(s.label)
    return images, labels


def det_accuracy(model: VovNet, images, labels) -> float:
    preds, _ = classify(model, images)
    return metrics.classification_metrics(preds, labels)[0]


def train_detection(cfg: TrainConfig, dataset, val=None, out_dir=None,
                    model: Optional[VovNet] = None) -> TrainResult:
    """Minimize 2-class cross-entropy with AdamW and a cosine schedule.

    ``dataset`` holds :class:`DetectSample` items or labelled :class:`RopeSample`
    items (extracted here with their ground-truth masks).
    """
    images, labels = _det_images(dataset, cfg)
    present = set(labels)
    if len(present) < 2:
        raise ValueError(f"both classes required, found only {sorted(present)}")
    seed_everything(cfg.seed, cfg.deterministic)
    out_dir = Path(out_dir) if out_dir is not None else None
    model = model or build_detmodel(cfg.model_config())
    opt = _make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    val_images, val_labels = _det_images(val, cfg) if val is not None else (images, labels)
    history, best, best_path, step = [], -1.0, None, 0
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        _set_lr(opt, lr)
        model.train()
        order = rng.permutation(len(images))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # batch norm needs more than one sample
            batch = [images[j] for j in idx]
            if cfg.augment:
                seeds = rng.integers(2**31, size=len(batch))
                batch = [train_transforms_det(im, int(sd)) for im, sd in zip(batch, seeds)]
            x, y = det_batch(batch, [labels[j] for j in idx])
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        row = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)), "val_accuracy": ""}
        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_iters is not None and step >= cfg.max_iters)
        if (epoch + 1) % cfg.val_every == 0 or last_epoch:
            acc = det_accuracy(model, val_images, val_labels)
            row["val_accuracy"] = acc
            if acc > best:
                best = acc
                if out_dir is not None:
                    best_path = save_checkpoint(out_dir / "det_best.pt", model,
                                                extra=_extra(cfg, epoch=epoch, val_accuracy=acc))
        history.append(row)
        logger.info("det epoch %d lr %.3g loss %.4f val_acc %s", epoch, lr, row["loss"], row["val_accuracy"])
        if last_epoch:
            break
    return _finish(cfg, model, history, best_path, best, out_dir, "det")


# -- evaluation ---------------------------------------------------------------

def _resolve_model(checkpoint, task):
    if isinstance(checkpoint, (str, Path)):
        return load_checkpoint(checkpoint, task=task)[0]
    return checkpoint


def evaluate(checkpoint, dataset, task: str, *, input_size: Optional[int] = None,
             measure_speed: bool = True, seg_checkpoint=None, threshold: float = 0.5,
             pad_frac: float = 0.05, per_image: Optional[list] = None) -> metrics.MetricsReport:
    """Score a model (or checkpoint path) on a dataset.

    seg: per-image SOD scores averaged over the set, at full resolution.
    det: accuracy and F on ground-truth extractions; with ``seg_checkpoint`` the
    same images are also classified from segmentation-derived masks and the
    scores are reported under ``extra``.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    model = _resolve_model(checkpoint, task)
    expected = RGBDUNet if task == "seg" else VovNet
    if not isinstance(model, expected):
        raise ValueError(f"task {task!r} does not match a {type(model).__name__} model")
    model.eval()
    rows = per_image if per_image is not None else []
    if task == "seg":
        size = input_size or dataset[0].gt_mask.shape[0]
        for s in dataset:
            sal = predict_saliency(model, s, size)
            rows.append({"image": s.id, **metrics.seg_scores(sal, s.gt_mask)})
        report = metrics.aggregate_seg(rows)
        shape = (1, 3, size, size)
        call = lambda x: model(x, torch.zeros_like(x[:, :1]))  # noqa: E731
    else:
        size = input_size or _det_size(dataset)
        images, labels = [], []
        for s in dataset:
            if isinstance(s, RopeSample):
                images.append(extract_foreground(s.color, s.gt_mask, pad_frac, size))
            else:
                images.append(resize_for_model(s.image, size))
            labels.append(s.label)
        preds, conf = classify(model, images)
        acc, fb = metrics.classification_metrics(preds, labels)
        for s, p, c in zip(dataset, preds, conf):
            rows.append({"image": s.id, "label": s.label, "pred": p, "confidence": float(c)})
        report = metrics.MetricsReport(accuracy=acc, f_beta_cls=fb, n_images=len(labels))
        if seg_checkpoint is not None:
            seg_model = _resolve_model(seg_checkpoint, "seg")
            seg_size = seg_model_input_size(dataset)
            seg_preds = [run_pipeline(seg_model, model, s, threshold, pad_frac, size,
                                      seg_input_size=seg_size).label for s in dataset]
            acc2, fb2 = metrics.classification_metrics(seg_preds, labels)
            report.extra.update({"accuracy_seg_masks": acc2, "f_beta_cls_seg_masks": fb2})
        shape = (1, 3, size, size)
        call = model
    report.param_count, report.model_bytes = metrics.count_params(model)
    if measure_speed:
        report.fps = metrics.measure_fps(call, shape, warmup=2, iters=10).fps
    report.check()
    return report


def _det_size(dataset) -> int:
    s = dataset[0]
    return s.gt_mask.shape[0] if isinstance(s, RopeSample) else s.image.shape[0]


def seg_model_input_size(dataset) -> Optional[int]:
    s = dataset[0]
    if not isinstance(s, RopeSample):
        raise ValueError("segmentation-derived masks need raw RopeSample inputs")
    h, w = s.gt_mask.shape
    return h if h == w else None


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
