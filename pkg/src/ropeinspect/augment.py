"""Background augmentation (rope compositing + depth synthesis) and training transforms."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .data import DEPTH_MAX_MM, DEPTH_MIN_MM, RopeSample, read_color, save_dataset

logger = logging.getLogger(__name__)

SCALE_RANGE = (0.5, 1.5)
ROTATION_RANGE = (-25.0, 25.0)
TRANSLATION_RANGE = (-0.25, 0.25)
MIN_VISIBLE = 0.8
MAX_ATTEMPTS = 20
RIM_PX = 3


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class PlacementParams:
    scale: float = 1.0
    rotation: float = 0.0  # degrees, counter-clockwise
    tx: float = 0.0  # fraction of width
    ty: float = 0.0  # fraction of height
    seed: int = 0

    def __post_init__(self):
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not ROTATION_RANGE[0] <= self.rotation <= ROTATION_RANGE[1]:
            raise ValueError(f"rotation {self.rotation} outside {ROTATION_RANGE}")
        for t in (self.tx, self.ty):
            if not TRANSLATION_RANGE[0] <= t <= TRANSLATION_RANGE[1]:
                raise ValueError(f"translation {t} outside {TRANSLATION_RANGE}")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.rotation == 0.0 and self.tx == 0.0 and self.ty == 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator, seed: int = 0) -> "PlacementParams":
        return cls(
            scale=float(rng.uniform(*SCALE_RANGE)),
            rotation=float(rng.uniform(*ROTATION_RANGE)),
            tx=float(rng.uniform(*TRANSLATION_RANGE)),
            ty=float(rng.uniform(*TRANSLATION_RANGE)),
            seed=seed,
        )


def _mask_center(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(xs.mean()), float(ys.mean())


def placement_matrix(mask: np.ndarray, p: PlacementParams) -> np.ndarray:
    """2x3 affine map: rotate and scale about the rope centroid, then translate."""
    h, w = mask.shape[:2]
    cx, cy = _mask_center(mask)
    m = cv2.getRotationMatrix2D((cx, cy), p.rotation, p.scale)
    m[0, 2] += p.tx * w
    m[1, 2] += p.ty * h
    return m


def visible_fraction(mask: np.ndarray, m: np.ndarray) -> float:
    """Fraction of the transformed rope bounding box that lies on the canvas."""
    h, w = mask.shape[:2]
    ys, xs = np.nonzero(mask)
    corners = np.array([[xs.min(), ys.min()], [xs.max() + 1, ys.min()],
                        [xs.min(), ys.max() + 1], [xs.max() + 1, ys.max() + 1]], dtype=np.float64)
    pts = corners @ m[:, :2].T + m[:, 2]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    area = max((x1 - x0) * (y1 - y0), 1e-12)
    ix = max(0.0, min(x1, w) - max(x0, 0.0))
    iy = max(0.0, min(y1, h) - max(y0, 0.0))
    return ix * iy / area


def _warp(img: np.ndarray, m: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def resolve_placement(mask: np.ndarray, p: PlacementParams) -> tuple[PlacementParams, np.ndarray]:
    """Return ``p`` (or a resampled placement) that keeps >= 80% of the rope bbox visible."""
    if not mask.any():
        raise PlacementError("empty mask")
    m = placement_matrix(mask, p)
    if visible_fraction(mask, m) >= MIN_VISIBLE:
        return p, m
    rng = np.random.default_rng(p.seed)
    for _ in range(MAX_ATTEMPTS):
        q = PlacementParams.sample(rng, seed=p.seed)
        m = placement_matrix(mask, q)
        if visible_fraction(mask, m) >= MIN_VISIBLE:
            return q, m
    raise PlacementError(f"no placement kept {MIN_VISIBLE:.0%} of the rope visible "
                         f"after {MAX_ATTEMPTS} attempts")


def composite_background(sample: RopeSample, bg: np.ndarray, p: PlacementParams,
                         sample_id: Optional[str] = None) -> RopeSample:
    """Paste the rope of ``sample`` onto ``bg`` under placement ``p``.

    All three planes use the same nearest-neighbour warp, so color pixels under
    the new mask are exact copies of source rope pixels.
    """
    mask = sample.gt_mask
    p, m = resolve_placement(mask, p)
    h, w = mask.shape
    if bg.shape[:2] != (h, w):
        bg = cv2.resize(bg, (w, h), interpolation=cv2.INTER_AREA)
    if p.is_identity:
        new_mask = mask.copy()
        rope = sample.color
    else:
        new_mask = _warp(mask, m, (h, w))
        rope = _warp(sample.color, m, (h, w))
    color = np.where(new_mask[..., None] > 0, rope, bg).astype(np.uint8)
    depth = synthesize_depth(sample, p, _matrix=m)
    return RopeSample(color=color, depth=depth, gt_mask=new_mask.astype(np.uint8),
                      id=sample_id or sample.id, label=sample.label)


def synthesize_depth(sample: RopeSample, p: PlacementParams, _matrix=None) -> Optional[np.ndarray]:
    """Depth map consistent with the pasted rope.

    Rope depth is warped like the color plane and divided by the scale; a
    3-pixel rim is filled by grey dilation of the rope depth; everything else
    is 0 (new background beyond sensor range).
    """
    if sample.depth is None:
        return None
    mask = sample.gt_mask
    h, w = mask.shape
    m = _matrix if _matrix is not None else resolve_placement(mask, p)[1]
    rope_depth = np.where(mask > 0, sample.depth, 0).astype(np.uint16)
    if p.is_identity:
        new_mask, warped = mask, rope_depth
    else:
        new_mask = _warp(mask, m, (h, w))
        warped = _warp(rope_depth, m, (h, w))
    vals = np.rint(warped.astype(np.float64) / p.scale)
    vals = np.where((vals >= DEPTH_MIN_MM) & (vals <= DEPTH_MAX_MM), vals, 0)
    depth = np.where(new_mask > 0, vals, 0).astype(np.uint16)
    return dilate_rim(depth, new_mask, RIM_PX)


def dilate_rim(depth: np.ndarray, mask: np.ndarray, width: int = RIM_PX) -> np.ndarray:
    """Fill a ``width``-pixel band around ``mask`` by repeated 3x3 grey dilation."""
    kernel = np.ones((3, 3), np.uint8)
    out = depth.copy()
    region = mask > 0
    for _ in range(width):
        grown = cv2.dilate(out, kernel)
        ring = cv2.dilate(region.astype(np.uint8), kernel) > 0
        new = ring & ~region
        out[new] = grown[new]
        region = ring
    return out


def expanded_count(n: int, fraction: float) -> int:
    """Number of augmented copies added to a split of ``n`` samples."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    return int(round(n * fraction))


def augment_dataset(samples: Sequence[RopeSample], backgrounds: Sequence[np.ndarray],
                    fraction: float, seed: int, bg_ids: Optional[Sequence[str]] = None):
    """Originals plus ``round(fraction * n)`` background-replaced copies.

    Returns ``(samples, provenance)``; provenance holds one record per
    generated sample.
    """
    n_new = expanded_count(len(samples), fraction)
    if not backgrounds:
        raise ValueError("no background images")
    bg_ids = list(bg_ids) if bg_ids is not None else [str(i) for i in range(len(backgrounds))]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(samples), size=n_new, replace=n_new > len(samples))
    out = list(samples)
    provenance = []
    for j, idx in enumerate(picks):
        src = samples[int(idx)]
        b = int(rng.integers(len(backgrounds)))
        p = PlacementParams.sample(rng, seed=int(rng.integers(2**31)))
        new_id = f"{src.id}_aug{j:04d}"
        aug = composite_background(src, backgrounds[b], p, sample_id=new_id)
        out.append(aug)
        provenance.append({"id": new_id, "source_id": src.id, "bg_id": bg_ids[b],
                           "placement": asdict(p)})
    return out, provenance


def augment_directory(manifest, bg_dir, fraction: float, seed: int, out_dir):
    """Materialize an expanded dataset plus ``provenance.json`` under ``out_dir``."""
    from .data import load_seg_dataset

    bg_paths = sorted(p for p in Path(bg_dir).iterdir()
                      if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not bg_paths:
        raise ValueError(f"no background images in {bg_dir}")
    backgrounds = [read_color(p) for p in bg_paths]
    samples = load_seg_dataset(manifest)
    out, provenance = augment_dataset(samples, backgrounds, fraction, seed,
                                      bg_ids=[p.stem for p in bg_paths])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    new_manifest = save_dataset(out, out_dir, split=manifest.split)
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2))
    logger.info("augmented %d -> %d samples", len(samples), len(out))
    return new_manifest, provenance


# -- training-time transforms -------------------------------------------------

def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the image mean by ``factor``."""
    if factor == 1.0:
        return img.copy()
    x = img.astype(np.float32)
    mean = x.mean()
    return np.clip(np.rint((x - mean) * factor + mean), 0, 255).astype(np.uint8)


def hflip_sample(s: RopeSample) -> RopeSample:
    return replace(
        s,
        color=s.color[:, ::-1].copy(),
        depth=None if s.depth is None else s.depth[:, ::-1].copy(),
        gt_mask=s.gt_mask[:, ::-1].copy(),
    )


def crop_sample(s: RopeSample, top: int, left: int, size: int) -> RopeSample:
    sl = (slice(top, top + size), slice(left, left + size))
    return replace(
        s,
        color=s.color[sl].copy(),
        depth=None if s.depth is None else s.depth[sl].copy(),
        gt_mask=s.gt_mask[sl].copy(),
    )


def train_transforms_seg(sample: RopeSample, seed, crop: int = 288,
                         contrast=(0.75, 1.25), p_flip: float = 0.5) -> RopeSample:
    """Flip (p=0.5), color contrast jitter, random square crop; planes stay aligned."""
    h, w = sample.gt_mask.shape
    if h < crop or w < crop:
        raise ValueError(f"sample {h}x{w} smaller than crop {crop}")
    rng = np.random.default_rng(seed)
    if rng.random() < p_flip:
        sample = hflip_sample(sample)
    factor = float(rng.uniform(*contrast))
    sample = replace(sample, color=adjust_contrast(sample.color, factor))
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return crop_sample(sample, top, left, crop)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with zero fill, same output shape."""
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), degrees, 1.0)
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def det_transform(img: np.ndarray, flip: bool, factor: float, degrees: float) -> np.ndarray:
    out = img[:, ::-1] if flip else img
    out = adjust_contrast(np.ascontiguousarray(out), factor)
    return rotate_image(out, degrees)


def train_transforms_det(image: np.ndarray, seed, contrast=(0.75, 1.25),
                         max_rotation: float = 30.0, p_flip: float = 0.5) -> np.ndarray:
    if image.shape[0] != image.shape[1]:
        raise ValueError("detection input must be square")
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < p_flip)
    factor = float(rng.uniform(*contrast))
    degrees = float(rng.uniform(-max_rotation, max_rotation))
    return det_transform(image, flip, factor, degrees)
