"""Single-file checkpoints: weights keyed by layer name plus the model config as JSON."""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import torch

from .detmodel import VovNet, VovNetConfig, build_detmodel
from .segmodel import RGBDUNet, UNetConfig, build_segmodel

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupted or mismatched checkpoint."""


def save_checkpoint(path, model, extra: dict | None = None) -> Path:
    if isinstance(model, RGBDUNet):
        task, cfg, fused = "seg", model.cfg.to_dict(), False
    elif isinstance(model, VovNet):
        task, cfg, fused = "det", model.cfg.to_dict(), bool(model.fused)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": FORMAT_VERSION,
        "task": task,
        "config": json.dumps(cfg),
        "fused": fused,
        "extra": json.dumps(extra or {}),
        "state_dict": model.state_dict(),
    }, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, OSError, zipfile.BadZipFile, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    except Exception as exc:  # unpickling errors come in many types
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or not {"task", "config", "state_dict"} <= set(blob):
        raise CheckpointError(f"{path} is not a ropeinspect checkpoint")
    return blob


def load_checkpoint(path, task: str | None = None):
    """Rebuild the model. Returns ``(model, meta)`` with the model in eval mode."""
    blob = read_checkpoint(path)
    if task is not None and blob["task"] != task:
        raise CheckpointError(f"checkpoint {path} holds a {blob['task']!r} model, expected {task!r}")
    cfg = json.loads(blob["config"])
    try:
        if blob["task"] == "seg":
            model = build_segmodel(UNetConfig.from_dict(cfg))
        else:
            model = build_detmodel(VovNetConfig.from_dict(cfg), deploy=bool(blob.get("fused")))
        model.load_state_dict(blob["state_dict"])
    except (ValueError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    model.eval()
    meta = {"task": blob["task"], "config": cfg, "fused": bool(blob.get("fused")),
            "extra": json.loads(blob.get("extra", "{}"))}
    return model, meta
