"""Segment -> binarize -> extract -> classify, shared by evaluation and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
import torch

from .data import LABELS, RopeSample, extract_foreground
from .detmodel import VovNet, to_det_tensor
from .segmodel import RGBDUNet, forward_seg

NO_ROPE = "no-rope-found"


def resize_for_model(img: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def predict_saliency(model: RGBDUNet, sample: RopeSample, input_size: Optional[int] = None) -> np.ndarray:
    """Saliency at the sample's own resolution."""
    h, w = sample.gt_mask.shape
    color, depth = sample.color, sample.depth
    if input_size is not None and (h, w) != (input_size, input_size):
        color = resize_for_model(color, input_size)
        depth = None if depth is None else resize_for_model(depth, input_size, nearest=True)
    sal = forward_seg(model, color, depth)[0]
    if sal.shape != (h, w):
        sal = cv2.resize(sal, (w, h), interpolation=cv2.INTER_LINEAR)
    return np.clip(sal, 0.0, 1.0)


@torch.no_grad()
def classify(model: VovNet, images) -> tuple[list[str], np.ndarray]:
    """Labels and softmax confidences for uint8 images."""
    if len(images) == 0:
        return [], np.zeros(0)
    model.eval()
    probs = torch.softmax(model(to_det_tensor(np.stack(images))), dim=1).numpy()
    idx = probs.argmax(axis=1)
    return [LABELS[i] for i in idx], probs[np.arange(len(idx)), idx]


@dataclass
class ImageResult:
    id: str
    saliency: np.ndarray
    mask: np.ndarray
    extracted: Optional[np.ndarray]
    label: str
    confidence: Optional[float]


def run_pipeline(seg_model: RGBDUNet, det_model: VovNet, sample: RopeSample,
                 threshold: float = 0.5, pad_frac: float = 0.05, out_size: int = 224,
                 seg_input_size: Optional[int] = None, mask: Optional[np.ndarray] = None) -> ImageResult:
    """Run both models on one sample. ``mask`` overrides the segmentation output."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if mask is None:
        sal = predict_saliency(seg_model, sample, seg_input_size)
        mask = (sal >= threshold).astype(np.uint8)
    else:
        sal = mask.astype(np.float32)
    if not mask.any():
        return ImageResult(sample.id, sal, mask, None, NO_ROPE, None)
    crop = extract_foreground(sample.color, mask, pad_frac, out_size)
    labels, conf = classify(det_model, [crop])
    return ImageResult(sample.id, sal, mask, crop, labels[0], float(conf[0]))


def overlay(color: np.ndarray, saliency: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the saliency map in red over the image."""
    a = (alpha * np.clip(saliency, 0, 1))[..., None]
    red = np.zeros_like(color, dtype=np.float32)
    red[..., 0] = 255
    return np.clip(np.rint(color * (1 - a) + red * a), 0, 255).astype(np.uint8)
