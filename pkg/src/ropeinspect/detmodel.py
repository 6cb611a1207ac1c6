"""VoVNet-19 classifiers: V2 (plain 3x3), V3 (ACB 3x3), V3.5 (DBB 3x3).

Every OSA 3x3 conv is a :class:`RepUnit`. For V3 / V3.5 the unit holds a
multi-branch block during training; :func:`reparameterize_model` swaps each one
for a conv-BN pair, after which the network is layer-for-layer identical to V2.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rep import ACBlock, DiverseBranchBlock, conv_bn, conv_bn_from_fused

VARIANTS = ("V2", "V3", "V3_5")


@dataclass
class VovNetConfig:
    variant: str = "V3_5"
    stem_channels: list[int] = field(default_factory=lambda: [64, 64, 128])
    stage_conv_channels: list[int] = field(default_factory=lambda: [64, 80, 96, 112])
    stage_out_channels: list[int] = field(default_factory=lambda: [112, 256, 384, 512])
    convs_per_osa: int = 3
    osa_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    num_classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        n = len(self.stage_conv_channels)
        if n != 4 or len(self.stage_out_channels) != n or len(self.osa_per_stage) != n:
            raise ValueError("stage lists must all have length 4")
        if len(self.stem_channels) != 3:
            raise ValueError("stem_channels must list three widths")
        if self.convs_per_osa < 1 or min(self.osa_per_stage) < 1:
            raise ValueError("convs_per_osa and osa_per_stage must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VovNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown VovNetConfig keys: {sorted(unknown)}")
        return cls(**d)


class RepUnit(nn.Module):
    """3x3 conv unit followed by ReLU; the conv may be a multi-branch block."""

    def __init__(self, cin: int, cout: int, kind: str = "plain"):
        super().__init__()
        if kind == "dbb":
            self.block = DiverseBranchBlock(cin, cout, 3)
        elif kind == "acb":
            self.block = ACBlock(cin, cout, 3)
        else:
            self.block = conv_bn(cin, cout, 3, 1, 1)
        self.act = nn.ReLU(inplace=True)

    @property
    def fusable(self) -> bool:
        return isinstance(self.block, (DiverseBranchBlock, ACBlock))

    def reparameterize(self) -> None:
        if self.fusable:
            self.block = conv_bn_from_fused(self.block.fuse())

    def forward(self, x):
        return self.act(self.block(x))


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ESE(nn.Module):
    """Effective squeeze-excitation: one full-width 1x1 conv and a hard-sigmoid gate."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Conv2d(channels, channels, 1)

    def gate(self, x):
        return F.hardsigmoid(self.fc(F.adaptive_avg_pool2d(x, 1)))

    def forward(self, x):
        return x * self.gate(x)


class OSA(nn.Module):
    def __init__(self, cin: int, conv_ch: int, cout: int, n_convs: int, kind: str, residual: bool):
        super().__init__()
        self.layers = nn.ModuleList(
            RepUnit(cin if i == 0 else conv_ch, conv_ch, kind) for i in range(n_convs)
        )
        self.concat_channels = cin + n_convs * conv_ch
        self.concat = ConvBNReLU(self.concat_channels, cout, k=1)
        self.ese = ESE(cout)
        self.residual = residual and cin == cout

    def forward(self, x):
        feats = [x]
        y = x
        for layer in self.layers:
            y = layer(y)
            feats.append(y)
        y = self.ese(self.concat(torch.cat(feats, dim=1)))
        return y + x if self.residual else y


class VovNet(nn.Module):
    def __init__(self, cfg: VovNetConfig, deploy: bool = False):
        super().__init__()
        self.cfg = cfg
        kind = {"V2": "plain", "V3": "acb", "V3_5": "dbb"}[cfg.variant]
        if deploy:
            kind = "plain"
        s0, s1, s2 = cfg.stem_channels
        self.stem = nn.Sequential(
            ConvBNReLU(3, s0, stride=2),
            ConvBNReLU(s0, s1, stride=1),
            ConvBNReLU(s1, s2, stride=2),
        )
        stages = []
        cin = s2
        for i, (conv_ch, out_ch, n_osa) in enumerate(
                zip(cfg.stage_conv_channels, cfg.stage_out_channels, cfg.osa_per_stage)):
            mods = []
            if i > 0:
                mods.append(nn.MaxPool2d(3, stride=2, ceil_mode=True))
            for j in range(n_osa):
                mods.append(OSA(cin, conv_ch, out_ch, cfg.convs_per_osa, kind, residual=True))
                cin = out_ch
            stages.append(nn.Sequential(*mods))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, cfg.num_classes)
        self.fused = deploy or cfg.variant == "V2"

    def features(self, x):
        return self.stages(self.stem(x))

    def forward(self, x):
        if x.shape[-1] != x.shape[-2]:
            raise ValueError(f"input must be square, got {tuple(x.shape[-2:])}")
        return self.head(torch.flatten(F.adaptive_avg_pool2d(self.features(x), 1), 1))

    def rep_units(self):
        return [m for m in self.modules() if isinstance(m, RepUnit)]


def build_detmodel(cfg: VovNetConfig | None = None, deploy: bool = False) -> VovNet:
    """Build a classifier; ``deploy=True`` gives the fused (V2-shaped) layout."""
    return VovNet(cfg or VovNetConfig(), deploy=deploy)


def reparameterize_model(model: VovNet) -> VovNet:
    """Collapse every multi-branch unit into a conv-BN pair, in place."""
    if model.training:
        raise ValueError("reparameterize_model needs an eval-mode model")
    units = [u for u in model.rep_units() if u.fusable]
    if not units:
        warnings.warn("model has no multi-branch units; nothing to re-parameterize", stacklevel=2)
        model.fused = True
        return model
    with torch.no_grad():
        for u in units:
            u.reparameterize()
    model.fused = True
    model.eval()
    return model


IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def to_det_tensor(images) -> torch.Tensor:
    """uint8 N x H x W x 3 -> normalized float N x 3 x H x W."""
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    a = (a.astype(np.float32) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(a).permute(0, 3, 1, 2).contiguous()


def forward_det(model: VovNet, images: torch.Tensor) -> torch.Tensor:
    """Logits (N x num_classes) for a normalized square batch."""
    h, w = images.shape[-2:]
    if h != w:
        raise ValueError(f"input must be square, got {h}x{w}")
    if h < 64:
        raise ValueError(f"input size must be >= 64, got {h}")
    return model(images)
