"""Dataset layout, loading, foreground extraction and synthetic rope fixtures.

On-disk layout::

    root/
      manifest.json
      color/<id>.png   8-bit RGB
      depth/<id>.png   16-bit grayscale, millimeters, 0 = no reading (optional)
      mask/<id>.png    8-bit, 0 / 255

A missing depth map is encoded either by omitting the file (``"depth": null``
in the manifest) or by an all-black depth image.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np

logger = logging.getLogger(__name__)

DEPTH_MIN_MM = 300
DEPTH_MAX_MM = 3000
LABELS = ("normal", "abnormal")
SPLITS = ("train", "test")


class DatasetError(ValueError):
    """Raised for unreadable files, bad manifests and rejected entries."""


@dataclass(frozen=True)
class RopeSample:
    color: np.ndarray  # H x W x 3 uint8, RGB
    depth: Optional[np.ndarray]  # H x W uint16 mm, None when missing
    gt_mask: np.ndarray  # H x W uint8 in {0, 1}
    id: str
    label: Optional[str] = None

    def __post_init__(self):
        h, w = self.gt_mask.shape[:2]
        if self.color.shape[:2] != (h, w):
            raise DatasetError(f"{self.id}: color {self.color.shape[:2]} vs mask {(h, w)}")
        if self.depth is not None and self.depth.shape[:2] != (h, w):
            raise DatasetError(f"{self.id}: depth {self.depth.shape[:2]} vs mask {(h, w)}")
        if self.label is not None and self.label not in LABELS:
            raise DatasetError(f"{self.id}: unknown label {self.label!r}")

    @property
    def has_depth(self) -> bool:
        return self.depth is not None


@dataclass(frozen=True)
class DetectSample:
    image: np.ndarray  # H x W x 3 uint8, background zeroed
    label: str
    id: str


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    color: str
    mask: str
    depth: Optional[str] = None
    label: Optional[str] = None


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    entries: list[ManifestEntry] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Read ``manifest.json`` (or a directory containing one)."""
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(raw, dict) or not isinstance(raw.get("entries"), list):
            raise DatasetError(f"{path}: manifest must be an object with an 'entries' list")
        entries = []
        for i, e in enumerate(raw["entries"]):
            if not isinstance(e, dict) or "color" not in e or "mask" not in e:
                raise DatasetError(f"{path}: entry {i} needs 'color' and 'mask'")
            entries.append(ManifestEntry(
                id=str(e.get("id", Path(e["color"]).stem)),
                color=e["color"],
                mask=e["mask"],
                depth=e.get("depth"),
                label=e.get("label"),
            ))
        split = raw.get("split", "train")
        if split not in SPLITS:
            raise DatasetError(f"{path}: split must be one of {SPLITS}, got {split!r}")
        return cls(root=path.parent, split=split, entries=entries)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = {
            "split": self.split,
            "entries": [
                {k: v for k, v in vars(e).items() if v is not None or k == "depth"}
                for e in self.entries
            ],
        }
        path.write_text(json.dumps(doc, indent=2))
        return path

    def validate(self) -> None:
        """Check every referenced file exists; raises on the first missing one."""
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DatasetError(f"duplicate entry id {e.id!r}")
            seen.add(e.id)
            for rel in (e.color, e.mask, e.depth):
                if rel is not None and not (self.root / rel).is_file():
                    raise DatasetError(f"entry {e.id!r}: missing file {rel}")
            if e.label is not None and e.label not in LABELS:
                raise DatasetError(f"entry {e.id!r}: label must be one of {LABELS}")

    def __len__(self):
        return len(self.entries)


# -- image io -----------------------------------------------------------------

def read_color(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DatasetError(f"unreadable image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_mask(path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise DatasetError(f"unreadable mask {path}")
    return (m >= 128).astype(np.uint8)


def clamp_depth(values: np.ndarray) -> np.ndarray:
    """Zero every reading outside the sensor range [300, 3000] mm."""
    d = np.asarray(values)
    valid = (d >= DEPTH_MIN_MM) & (d <= DEPTH_MAX_MM)
    return np.where(valid, d, 0).astype(np.uint16)


def read_depth(path) -> Optional[np.ndarray]:
    """Decode a 16-bit depth PNG. Returns None for an all-zero (missing) map."""
    d = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if d is None:
        raise DatasetError(f"unreadable depth map {path}")
    if d.ndim == 3:
        d = d[..., 0]
    d = clamp_depth(d)
    if not d.any():
        return None
    return d


def write_color(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2BGR)):
        raise DatasetError(f"failed to write {path}")


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), (np.asarray(mask) > 0).astype(np.uint8) * 255)


def write_depth(path, depth: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.asarray(depth, dtype=np.uint16))


# -- loading ------------------------------------------------------------------

def _load_entry(root: Path, e: ManifestEntry) -> RopeSample:
    color = read_color(root / e.color)
    mask = read_mask(root / e.mask)
    depth = read_depth(root / e.depth) if e.depth else None
    return RopeSample(color=color, depth=depth, gt_mask=mask, id=e.id, label=e.label)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_seg_dataset(manifest: DatasetManifest, workers: int = 1) -> list[RopeSample]:
    """Load every manifest entry as a :class:`RopeSample`.

    Entries whose color/depth/mask shapes disagree are skipped with a warning;
    an unreadable file aborts the whole manifest.
    """
    manifest.validate()

    def load(e):
        try:
            return _load_entry(manifest.root, e)
        except DatasetError as exc:
            if "unreadable" in str(exc):
                raise
            logger.warning("rejected entry %s: %s", e.id, exc)
            return None

    samples = _map(load, manifest.entries, workers)
    return [s for s in samples if s is not None]


def load_detect_dataset(
    manifest: DatasetManifest,
    pad_frac: float = 0.05,
    out_size: int = 224,
    workers: int = 1,
) -> list[DetectSample]:
    """Load labelled entries and extract their ropes with the ground-truth masks."""
    for e in manifest.entries:
        if e.label is None:
            raise DatasetError(f"entry {e.id!r} has no label")
    samples = load_seg_dataset(manifest, workers=workers)
    out = [
        DetectSample(
            image=extract_foreground(s.color, s.gt_mask, pad_frac, out_size),
            label=s.label,
            id=s.id,
        )
        for s in samples
    ]
    counts = class_counts(out)
    logger.info("detect dataset %s: %d abnormal, %d normal",
                manifest.root, counts["abnormal"], counts["normal"])
    return out


def class_counts(samples: Iterable) -> dict[str, int]:
    c = Counter(s.label for s in samples)
    return {lab: c.get(lab, 0) for lab in LABELS}


def save_dataset(samples: Sequence[RopeSample], root, split: str = "train") -> DatasetManifest:
    """Write samples in the standard layout and return the saved manifest."""
    root = Path(root)
    entries = []
    for s in samples:
        color = f"color/{s.id}.png"
        mask = f"mask/{s.id}.png"
        depth = f"depth/{s.id}.png" if s.depth is not None else None
        write_color(root / color, s.color)
        write_mask(root / mask, s.gt_mask)
        if depth is not None:
            write_depth(root / depth, s.depth)
        entries.append(ManifestEntry(id=s.id, color=color, mask=mask, depth=depth, label=s.label))
    manifest = DatasetManifest(root=root, split=split, entries=entries)
    manifest.save()
    return manifest


# -- foreground extraction ----------------------------------------------------

def foreground_box(mask: np.ndarray, pad_frac: float = 0.05) -> tuple[int, int, int, int]:
    """Padded mask bounding box ``(top, left, bottom, right)``, exclusive end, clipped.

    Padding per side is ``round(pad_frac * longest bbox side)``.
    """
    if not 0.0 <= pad_frac <= 0.5:
        raise ValueError("pad_frac must lie in [0, 0.5]")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    top, bottom = rows[0], rows[-1] + 1
    left, right = cols[0], cols[-1] + 1
    pad = int(round(pad_frac * max(bottom - top, right - left)))
    h, w = mask.shape[:2]
    return (max(0, top - pad), max(0, left - pad), min(h, bottom + pad), min(w, right + pad))


def letterbox(img: np.ndarray) -> np.ndarray:
    """Zero-pad to a square, content centered."""
    h, w = img.shape[:2]
    side = max(h, w)
    if h == w:
        return img
    out = np.zeros((side, side) + img.shape[2:], dtype=img.dtype)
    y0, x0 = (side - h) // 2, (side - w) // 2
    out[y0:y0 + h, x0:x0 + w] = img
    return out


def extract_foreground(color: np.ndarray, mask: np.ndarray,
                       pad_frac: float = 0.05, out_size: int = 224) -> np.ndarray:
    """Zero the background, crop the padded mask bbox, letterbox and resize."""
    mask = np.asarray(mask) > 0
    top, left, bottom, right = foreground_box(mask, pad_frac)
    fg = np.where(mask[..., None], color, 0).astype(np.uint8)
    crop = letterbox(fg[top:bottom, left:right])
    if crop.shape[0] == out_size:
        return crop.copy()
    interp = cv2.INTER_AREA if crop.shape[0] > out_size else cv2.INTER_LINEAR
    return cv2.resize(crop, (out_size, out_size), interpolation=interp)


# -- synthetic fixtures -------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)


def _fixture_params(rng: np.random.Generator, size: int) -> dict:
    return {
        "angle": rng.uniform(25.0, 65.0) * rng.choice([-1, 1]),
        "offset": rng.uniform(-0.12, 0.12) * size,
        "width": rng.uniform(0.10, 0.16) * size,
        "period": rng.uniform(0.30, 0.45),  # strand period, in rope widths
        "twist": rng.uniform(0.6, 1.2),
        "tint": rng.uniform(0.85, 1.0, size=3),
        "depth_mm": int(rng.integers(600, 1800)),
        "break_pos": rng.uniform(-0.2, 0.2) * size,
        "break_len": rng.uniform(0.9, 1.3),  # in rope widths
        "bg_cells": int(rng.integers(3, 7)),
        "bg_colors": rng.uniform(20, 235, size=(2, 3)),
        "bg_seed": int(rng.integers(2**31)),
        "depth_seed": int(rng.integers(2**31)),
        "break_seed": int(rng.integers(2**31)),
    }


def render_fixture(params: dict, size: int, abnormal: bool, sample_id: str) -> RopeSample:
    """Draw a twisted-strand rope across a textured background.

    ``abnormal`` adds a strand-break discontinuity; every other pixel is
    identical to the normal render of the same ``params``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    th = math.radians(params["angle"])
    # u runs along the rope axis, v across it
    u = (xx - c) * math.cos(th) + (yy - c) * math.sin(th)
    v = -(xx - c) * math.sin(th) + (yy - c) * math.cos(th) - params["offset"]
    half = params["width"] / 2.0
    mask = (np.abs(v) <= half).astype(np.uint8)

    bg_rng = np.random.default_rng(params["bg_seed"])
    blend = _smooth_noise(bg_rng, size, params["bg_cells"])[..., None]
    lo, hi = params["bg_colors"]
    bg = lo * (1 - blend) + hi * blend + bg_rng.normal(0, 6, (size, size, 3))

    width = params["width"]
    phase = (u + params["twist"] * v) / (params["period"] * width)
    strands = 0.5 + 0.5 * np.cos(2 * math.pi * phase)
    roundness = np.sqrt(np.clip(1 - (v / half) ** 2, 0, 1))
    shade = 70 + 150 * strands * (0.4 + 0.6 * roundness)
    rope = shade[..., None] * params["tint"]

    if abnormal:
        d_rng = np.random.default_rng(params["break_seed"])
        along = np.abs(u - params["break_pos"])
        region = (along <= params["break_len"] * width / 2) & (mask > 0)
        frayed = d_rng.random((size, size)) < 0.25
        dark = np.array([70.0, 38.0, 20.0])  # rust-brown gap
        rope = np.where(region[..., None], dark, rope)
        rope = np.where((region & frayed)[..., None], 250.0, rope)

    color = np.where(mask[..., None] > 0, rope, bg)
    color = np.clip(np.rint(color), 0, 255).astype(np.uint8)

    dep_rng = np.random.default_rng(params["depth_seed"])
    depth_vals = params["depth_mm"] + dep_rng.integers(-5, 6, (size, size))
    depth = np.where(mask > 0, depth_vals, 0).astype(np.uint16)

    label = "abnormal" if abnormal else "normal"
    return RopeSample(color=color, depth=depth, gt_mask=mask, id=sample_id, label=label)


def generate_fixture(seed: int, n: int, size: int = 64) -> list[RopeSample]:
    """Deterministic labelled rope samples; odd indices are abnormal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        params = _fixture_params(rng, size)
        out.append(render_fixture(params, size, abnormal=bool(i % 2), sample_id=f"fx{seed}_{i:04d}"))
    return out


def fixture_pair(seed: int, index: int, size: int = 64) -> tuple[RopeSample, RopeSample]:
    """Normal and abnormal renders of fixture sample ``index`` under ``seed``."""
    rng = np.random.default_rng(seed)
    for _ in range(index + 1):
        params = _fixture_params(rng, size)
    sid = f"fx{seed}_{index:04d}"
    return (render_fixture(params, size, False, sid), render_fixture(params, size, True, sid))
