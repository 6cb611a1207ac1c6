"""RGBD-UNet: a U-Net color stream with a mirrored depth encoder fused by CMA blocks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH_SCALE_MM = 3000.0


@dataclass
class UNetConfig:
    encoder_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    in_channels_color: int = 3
    in_channels_depth: int = 1
    use_depth_branch: bool = True
    use_cma: bool = True
    out_channels: int = 1

    def __post_init__(self):
        ch = list(self.encoder_channels)
        if len(ch) < 3:
            raise ValueError("encoder_channels needs at least two levels plus a bottleneck")
        if any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] <= 0:
            raise ValueError(f"encoder_channels must be strictly increasing positives, got {ch}")
        self.encoder_channels = ch

    @property
    def levels(self) -> int:
        """Number of pooled encoder levels (bottleneck excluded)."""
        return len(self.encoder_channels) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class CMA(nn.Module):
    """Cross-modal attention fusion of a depth feature map into the color stream.

    concat -> 3x3 conv halving channels (+BN, ReLU) -> channel gate
    (avg pool, 1x1 conv, sigmoid) -> spatial gate (channel mean, sigmoid)
    -> residual add onto the color features.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.channel_att = nn.Conv2d(channels, channels, 1, bias=False)

    def gates(self, color: torch.Tensor, depth: torch.Tensor):
        f = self.fuse(torch.cat([color, depth], dim=1))
        cg = torch.sigmoid(self.channel_att(F.adaptive_avg_pool2d(f, 1)))
        f = f * cg
        sg = torch.sigmoid(f.mean(dim=1, keepdim=True))
        return f * sg, cg, sg

    def forward(self, color: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        if color.shape != depth.shape:
            raise ValueError(f"CMA inputs differ: {tuple(color.shape)} vs {tuple(depth.shape)}")
        out, _, _ = self.gates(color, depth)
        return color + out


class AddFusion(nn.Module):
    def forward(self, color, depth):
        if color.shape != depth.shape:
            raise ValueError(f"fusion inputs differ: {tuple(color.shape)} vs {tuple(depth.shape)}")
        return color + depth


def cma_fuse(cma: CMA, color_feat: torch.Tensor, depth_feat: torch.Tensor) -> torch.Tensor:
    return cma(color_feat, depth_feat)


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = DoubleConv(2 * cout, cout)

    def forward(self, x, skip):
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class RGBDUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        enc_ch = ch[:-1]
        self.enc = nn.ModuleList()
        cin = cfg.in_channels_color
        for c in enc_ch:
            self.enc.append(DoubleConv(cin, c))
            cin = c
        self.bottleneck = DoubleConv(enc_ch[-1], ch[-1])
        if cfg.use_depth_branch:
            self.depth_enc = nn.ModuleList()
            cin = cfg.in_channels_depth
            for c in enc_ch:
                self.depth_enc.append(DoubleConv(cin, c))
                cin = c
            self.fusions = nn.ModuleList(CMA(c) if cfg.use_cma else AddFusion() for c in enc_ch)
        self.ups = nn.ModuleList(Up(ch[i + 1], ch[i]) for i in reversed(range(len(enc_ch))))
        self.head = nn.Conv2d(ch[0], cfg.out_channels, 1)

    @property
    def divisor(self) -> int:
        return 2 ** self.cfg.levels

    def forward(self, color: torch.Tensor, depth: torch.Tensor | None = None) -> torch.Tensor:
        h, w = color.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"input {h}x{w} not divisible by {self.divisor}")
        if self.cfg.use_depth_branch and depth is None:
            depth = color.new_zeros((color.shape[0], self.cfg.in_channels_depth, h, w))
        skips = []
        x, d = color, depth
        for i, block in enumerate(self.enc):
            x = block(x)
            if self.cfg.use_depth_branch:
                d = self.depth_enc[i](d)
                x = self.fusions[i](x, d)
                d = F.max_pool2d(d, 2)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return torch.sigmoid(self.head(x))


def build_segmodel(cfg: UNetConfig | None = None) -> RGBDUNet:
    return RGBDUNet(cfg or UNetConfig())


def cma_param_count(channels) -> int:
    """Parameters of the CMA blocks for the given level widths."""
    return sum(18 * c * c + 2 * c + c * c for c in channels)


def to_color_tensor(colors) -> torch.Tensor:
    """uint8 N x H x W x 3 (or one image) -> float N x 3 x H x W in [0, 1]."""
    a = np.asarray(colors)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(a.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


def to_depth_tensor(depths, shape=None) -> torch.Tensor:
    """Depth maps in mm (None = missing) -> float N x 1 x H x W, value / 3000."""
    if depths is None or isinstance(depths, np.ndarray):
        depths = [depths]
    out = []
    for d in depths:
        if d is None:
            if shape is None:
                raise ValueError("shape needed for a missing depth map")
            out.append(np.zeros(shape, dtype=np.float32))
        else:
            out.append(np.asarray(d, dtype=np.float32) / DEPTH_SCALE_MM)
    return torch.from_numpy(np.stack(out))[:, None]


@torch.no_grad()
def forward_seg(model: RGBDUNet, color, depth=None) -> np.ndarray:
    """Saliency maps in [0, 1] for uint8 color images and optional depth maps.

    ``depth`` may be None, one map, or a list whose items may be None.
    """
    x = to_color_tensor(color)
    n, _, h, w = x.shape
    if depth is None:
        d = torch.zeros((n, 1, h, w))
    else:
        if isinstance(depth, np.ndarray) and depth.ndim == 2:
            depth = [depth]
        d = to_depth_tensor(list(depth), shape=(h, w))
    was_training = model.training
    model.eval()
    try:
        return model(x, d)[:, 0].numpy()
    finally:
        model.train(was_training)
