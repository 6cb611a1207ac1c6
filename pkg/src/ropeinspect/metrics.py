"""Salient-object segmentation metrics, binary classification scores, speed and size.

Segmentation scores follow the usual SOD conventions: F-measure with
beta^2 = 0.3 swept over 255 thresholds, enhanced-alignment E-measure over the
same sweep, MAE, and the structure measure with alpha = 0.5.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

BETA_SQ = 0.3
S_ALPHA = 0.5
N_THRESHOLDS = 255
_EPS = np.spacing(1.0)


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """``1/255 .. 255/255``; a pixel is foreground when ``pred >= t``."""
    return np.arange(1, n + 1, dtype=np.float64) / n


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("gt must be binary {0, 1}")
    return pred, gt.astype(bool)


def _counts_at_or_above(values: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Number of ``values >= t`` for every ``t`` in ``ts``."""
    v = np.sort(values, axis=None)
    return (v.size - np.searchsorted(v, ts, side="left")).astype(np.float64)


def f_beta(precision, recall, beta_sq: float = BETA_SQ):
    """F-score with 0 wherever the denominator vanishes."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta_sq * p + r
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(den > 0, (1 + beta_sq) * p * r / np.where(den > 0, den, 1), 0.0)
    return f


def f_measure_curve(pred, gt, beta_sq: float = BETA_SQ):
    """F over the 255-threshold sweep. Returns ``(curve, max_f, mean_f)``."""
    if beta_sq <= 0:
        raise ValueError("beta_sq must be positive")
    pred, gt = _check(pred, gt)
    ts = thresholds()
    tp = _counts_at_or_above(pred[gt], ts)
    n_pred = _counts_at_or_above(pred, ts)
    n_gt = float(gt.sum())
    precision = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    curve = f_beta(precision, recall, beta_sq)
    return curve, float(curve.max()), float(curve.mean())


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return float(np.abs(pred - gt).mean())


def enhanced_alignment(pred_bin: np.ndarray, gt: np.ndarray, eps: float = _EPS) -> float:
    """E-measure of one binary map against a binary ground truth."""
    pb = pred_bin.astype(np.float64)
    g = gt.astype(np.float64)
    gm = g.mean()
    if gm == 0.0:
        return float(1.0 - pb.mean())
    if gm == 1.0:
        return float(pb.mean())
    phi_p = pb - pb.mean()
    phi_g = g - gm
    align = 2 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + eps)
    return float(((align + 1) ** 2 / 4).mean())


def e_measure_curve(pred, gt, eps: float = _EPS):
    """E over the 255-threshold sweep. Returns ``(curve, max_e, mean_e)``.

    A binarized map and a binary ground truth take only four value pairs, so
    each threshold reduces to the confusion counts.
    """
    pred, gt = _check(pred, gt)
    ts = thresholds()
    n = float(gt.size)
    n_pred = _counts_at_or_above(pred, ts)
    u = gt.mean()
    if u == 0.0:
        curve = 1.0 - n_pred / n
    elif u == 1.0:
        curve = n_pred / n
    else:
        tp = _counts_at_or_above(pred[gt], ts)
        fp = n_pred - tp
        fn = gt.sum() - tp
        tn = n - tp - fp - fn
        mp = n_pred / n
        curve = np.zeros_like(ts)
        for count, p_val, g_val in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
            phi_p = p_val - mp
            phi_g = g_val - u
            align = 2 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + eps)
            curve += count * (align + 1) ** 2 / 4
        curve /= n
    return curve, float(curve.max()), float(curve.mean())


# -- structure measure --------------------------------------------------------

def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2 * x / (x * x + 1 + sigma + _EPS))


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return float(u * _object_score(fg[gt]) + (1 - u) * _object_score(bg[~gt]))


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _block_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + _EPS))
    return 1.0 if beta == 0 else 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    g = gt.astype(np.float64)
    quads = [
        (slice(0, cy), slice(0, cx), cx * cy / area),
        (slice(0, cy), slice(cx, w), (w - cx) * cy / area),
        (slice(cy, h), slice(0, cx), cx * (h - cy) / area),
    ]
    w4 = 1 - sum(q[2] for q in quads)
    quads.append((slice(cy, h), slice(cx, w), w4))
    return float(sum(wt * _block_ssim(pred[r, c], g[r, c]) for r, c, wt in quads))


def s_measure(pred, gt, alpha: float = S_ALPHA) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt)
    return float(max(score, 0.0))


# -- classification -----------------------------------------------------------

def classification_metrics(preds: Sequence[str], gts: Sequence[str],
                           beta_sq: float = BETA_SQ, positive: str = "abnormal"):
    """``(accuracy, f_beta)`` with ``positive`` as the positive class."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(gts)} labels")
    if len(preds) == 0:
        raise ValueError("empty input")
    p = np.asarray(preds) == positive
    g = np.asarray(gts) == positive
    accuracy = float((np.asarray(preds) == np.asarray(gts)).mean())
    tp = float((p & g).sum())
    precision = tp / p.sum() if p.sum() else 0.0
    recall = tp / g.sum() if g.sum() else 0.0
    return accuracy, float(f_beta(precision, recall, beta_sq))


# -- speed and size -----------------------------------------------------------

@dataclass
class FpsResult:
    fps: float
    mean_seconds: float
    cv: float
    iters: int


def measure_fps(model: Callable, input_shape, warmup: int = 3, iters: int = 20,
                make_input: Optional[Callable] = None) -> FpsResult:
    """Single-image throughput of ``model`` after ``warmup`` discarded calls.

    ``make_input`` builds the argument from ``input_shape``; for torch modules
    the default is a zero tensor under ``torch.inference_mode``.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    ctx = _no_grad()
    if make_input is None:
        make_input = _default_input
    x = make_input(input_shape)
    times = []
    with ctx:
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    t = np.asarray(times)
    mean = float(t.mean())
    mean = max(mean, 1e-9)
    return FpsResult(fps=1.0 / mean, mean_seconds=mean, cv=float(t.std() / mean), iters=iters)


def _default_input(shape):
    try:
        import torch
        return torch.zeros(tuple(shape))
    except ImportError:  # pragma: no cover
        return np.zeros(shape, dtype=np.float32)


def _no_grad():
    try:
        import torch
        return torch.inference_mode()
    except ImportError:  # pragma: no cover
        import contextlib
        return contextlib.nullcontext()


def count_params(model) -> tuple[int, int]:
    """``(scalar parameter count, bytes as float32)``."""
    n = int(sum(p.numel() for p in model.parameters()))
    return n, n * 4


# -- reports ------------------------------------------------------------------

SEG_FIELDS = ("max_f", "mean_f", "mae", "max_e", "mean_e", "s_measure")
DET_FIELDS = ("accuracy", "f_beta_cls")


@dataclass
class MetricsReport:
    max_f: Optional[float] = None
    mean_f: Optional[float] = None
    mae: Optional[float] = None
    max_e: Optional[float] = None
    mean_e: Optional[float] = None
    s_measure: Optional[float] = None
    accuracy: Optional[float] = None
    f_beta_cls: Optional[float] = None
    fps: Optional[float] = None
    param_count: Optional[int] = None
    model_bytes: Optional[int] = None
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def scores(self) -> dict:
        return {k: getattr(self, k) for k in SEG_FIELDS + DET_FIELDS if getattr(self, k) is not None}

    def check(self) -> None:
        for k, v in self.scores().items():
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                raise ValueError(f"{k}={v} outside [0, 1]")
        if self.fps is not None and not self.fps > 0:
            raise ValueError("fps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def seg_scores(pred, gt, beta_sq: float = BETA_SQ, alpha: float = S_ALPHA) -> dict:
    """All six segmentation scores for one image."""
    _, max_f, mean_f = f_measure_curve(pred, gt, beta_sq)
    _, max_e, mean_e = e_measure_curve(pred, gt)
    return {
        "max_f": max_f, "mean_f": mean_f, "mae": mae(pred, gt),
        "max_e": max_e, "mean_e": mean_e, "s_measure": s_measure(pred, gt, alpha),
    }


def aggregate_seg(per_image: Sequence[dict]) -> MetricsReport:
    """Dataset scores are the mean of per-image scores."""
    if not per_image:
        raise ValueError("no images to aggregate")
    means = {k: float(np.mean([r[k] for r in per_image])) for k in SEG_FIELDS}
    return MetricsReport(**means, n_images=len(per_image))


def evaluate_folders(pred_dir, gt_dir, out_json=None, out_csv=None) -> MetricsReport:
    """Score 8-bit prediction PNGs against same-named ground-truth masks."""
    import cv2

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    rows = []
    for gt_path in sorted(gt_dir.glob("*.png")):
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise FileNotFoundError(f"no prediction for {gt_path.name}")
        gt = (cv2.imread(str(gt_path), cv2.IMREAD_GRAYSCALE) >= 128).astype(np.uint8)
        pred = cv2.imread(str(pred_path), cv2.IMREAD_GRAYSCALE).astype(np.float64) / 255.0
        rows.append({"image": gt_path.stem, **seg_scores(pred, gt)})
    report = aggregate_seg(rows)
    if out_json is not None:
        report.to_json(out_json)
    if out_csv is not None:
        write_csv(out_csv, rows)
    return report


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
