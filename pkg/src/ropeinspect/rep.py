"""Multi-branch convolution blocks and their exact collapse into one convolution.

Two training-time blocks are provided:

* :class:`DiverseBranchBlock` -- k x k, 1 x 1, 1 x 1 -> k x k and
  1 x 1 -> average-pool branches, each with batch norm.
* :class:`ACBlock` -- k x k, k x 1 and 1 x k branches, each with batch norm.

Both expose ``fuse()`` returning :class:`FusedConvParams` (a kernel and a
bias) such that a single ``conv2d`` reproduces the eval-mode block output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FusedConvParams:
    weight: torch.Tensor  # out x in x k x k
    bias: torch.Tensor  # out

    def apply(self, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
        k = self.weight.shape[-1]
        return F.conv2d(x, self.weight, self.bias, stride=stride, padding=k // 2)

    @property
    def param_count(self) -> int:
        return self.weight.numel() + self.bias.numel()


# -- kernel transforms --------------------------------------------------------

def fold_bn(kernel: torch.Tensor, bn: nn.BatchNorm2d):
    """Fold eval-mode batch norm into the preceding bias-free conv."""
    if not (torch.isfinite(bn.running_mean).all() and torch.isfinite(bn.running_var).all()):
        raise ValueError("batch norm running statistics are not finite")
    std = (bn.running_var + bn.eps).sqrt()
    gamma = bn.weight if bn.affine else torch.ones_like(std)
    beta = bn.bias if bn.affine else torch.zeros_like(std)
    return kernel * (gamma / std).reshape(-1, 1, 1, 1), beta - bn.running_mean * gamma / std


def bn_as_affine(bn: nn.BatchNorm2d):
    """Per-channel ``(scale, shift)`` of an eval-mode batch norm."""
    std = (bn.running_var + bn.eps).sqrt()
    gamma = bn.weight if bn.affine else torch.ones_like(std)
    beta = bn.bias if bn.affine else torch.zeros_like(std)
    return gamma / std, beta - bn.running_mean * gamma / std


def pad_to(kernel: torch.Tensor, k: int) -> torch.Tensor:
    """Zero-pad a (kh x kw) kernel to k x k, centered."""
    kh, kw = kernel.shape[-2:]
    ph, pw = (k - kh) // 2, (k - kw) // 2
    return F.pad(kernel, [pw, k - kw - pw, ph, k - kh - ph])


def avg_kernel(channels: int, k: int, dtype=None, device=None) -> torch.Tensor:
    """Average pooling over k x k written as a per-channel conv kernel."""
    w = torch.zeros(channels, channels, k, k, dtype=dtype, device=device)
    idx = torch.arange(channels)
    w[idx, idx] = 1.0 / (k * k)
    return w


def compose_1x1_kxk(k1: torch.Tensor, b1: torch.Tensor, k2: torch.Tensor, b2: torch.Tensor):
    """Merge ``conv_kxk(conv_1x1(x) + b1) + b2`` into one k x k conv.

    Valid when the intermediate map is padded with ``b1`` (see
    :class:`BNAndPad`), which is exactly what a zero-padded input produces.
    """
    k = F.conv2d(k2, k1.permute(1, 0, 2, 3))
    b = (k2 * b1.reshape(1, -1, 1, 1)).sum(dim=(1, 2, 3)) + b2
    return k, b


class BNAndPad(nn.Module):
    """Batch norm followed by padding with the value a zero input maps to.

    Keeps 1x1 -> BN -> kxk sequences exactly collapsible at image borders.
    """

    def __init__(self, channels: int, pad: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels)
        self.pad = pad

    def forward(self, x):
        out = self.bn(x)
        if self.pad == 0:
            return out
        if self.bn.training:
            # training mode: use the same normalization as the batch
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            std = (var + self.bn.eps).sqrt()
            fill = self.bn.bias - mean * self.bn.weight / std
        else:
            _, fill = bn_as_affine(self.bn)
        out = F.pad(out, [self.pad] * 4)
        fill = fill.reshape(1, -1, 1, 1)
        p = self.pad
        border = torch.ones_like(out[:1, :1])
        border[..., p:-p, p:-p] = 0
        return out * (1 - border) + fill * border


def conv_bn(cin: int, cout: int, kernel_size, stride: int = 1, padding=0) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=padding, bias=False),
        nn.BatchNorm2d(cout),
    )


def conv_bn_from_fused(params: FusedConvParams, stride: int = 1, eps: float = 1e-5) -> nn.Sequential:
    """Deploy form of a fused block: conv + identity-scaled BN carrying the bias.

    Shapes and parameter names match a plain ``conv_bn`` unit, so a fused block
    is interchangeable with an ordinary conv-BN layer.
    """
    cout, cin, k, _ = params.weight.shape
    m = conv_bn(cin, cout, k, stride=stride, padding=k // 2)
    m[1].eps = eps
    with torch.no_grad():
        m[0].weight.copy_(params.weight)
        m[1].running_mean.zero_()
        m[1].running_var.fill_(1.0)
        m[1].weight.fill_(math.sqrt(1.0 + eps))
        m[1].bias.copy_(params.bias)
    return m


# -- blocks -------------------------------------------------------------------

class DiverseBranchBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        k, p = kernel_size, kernel_size // 2
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.branch_kxk = conv_bn(cin, cout, k, stride, p)
        self.branch_1x1 = conv_bn(cin, cout, 1, stride, 0)
        self.branch_1x1_kxk = nn.Sequential()
        self.branch_1x1_kxk.add_module("conv1", nn.Conv2d(cin, cin, 1, bias=False))
        self.branch_1x1_kxk.add_module("bn1", BNAndPad(cin, p))
        self.branch_1x1_kxk.add_module("conv2", nn.Conv2d(cin, cout, k, stride=stride, bias=False))
        self.branch_1x1_kxk.add_module("bn2", nn.BatchNorm2d(cout))
        self.branch_1x1_avg = nn.Sequential()
        self.branch_1x1_avg.add_module("conv", nn.Conv2d(cin, cout, 1, bias=False))
        self.branch_1x1_avg.add_module("bn", BNAndPad(cout, p))
        self.branch_1x1_avg.add_module("avg", nn.AvgPool2d(k, stride=stride, padding=0))
        self.branch_1x1_avg.add_module("avgbn", nn.BatchNorm2d(cout))
        with torch.no_grad():
            # start the inner 1x1 as identity
            nn.init.dirac_(self.branch_1x1_kxk.conv1.weight)

    def forward(self, x):
        return (self.branch_kxk(x) + self.branch_1x1(x)
                + self.branch_1x1_kxk(x) + self.branch_1x1_avg(x))

    def fuse(self) -> FusedConvParams:
        return dbb_fuse(self)


def dbb_fuse(block: DiverseBranchBlock) -> FusedConvParams:
    """Equivalent single k x k conv of an eval-mode :class:`DiverseBranchBlock`."""
    k = block.k
    k_kxk, b_kxk = fold_bn(block.branch_kxk[0].weight, block.branch_kxk[1])

    k_1x1, b_1x1 = fold_bn(block.branch_1x1[0].weight, block.branch_1x1[1])
    k_1x1 = pad_to(k_1x1, k)

    seq = block.branch_1x1_kxk
    k1, b1 = fold_bn(seq.conv1.weight, seq.bn1.bn)
    k2, b2 = fold_bn(seq.conv2.weight, seq.bn2)
    k_seq, b_seq = compose_1x1_kxk(k1, b1, k2, b2)

    avg = block.branch_1x1_avg
    ka, ba = fold_bn(avg.conv.weight, avg.bn.bn)
    kavg = avg_kernel(block.cout, k, dtype=ka.dtype, device=ka.device)
    k_avg, b_avg = compose_1x1_kxk(ka, ba, kavg, torch.zeros_like(ba))
    k_avg, b_avg = _post_bn(k_avg, b_avg, avg.avgbn)

    weight = k_kxk + k_1x1 + k_seq + k_avg
    bias = b_kxk + b_1x1 + b_seq + b_avg
    return FusedConvParams(weight.detach().clone(), bias.detach().clone())


def _post_bn(kernel, bias, bn):
    scale, shift = bn_as_affine(bn)
    return kernel * scale.reshape(-1, 1, 1, 1), bias * scale + shift


class ACBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        k, p = kernel_size, kernel_size // 2
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.branch_kxk = conv_bn(cin, cout, (k, k), stride, (p, p))
        self.branch_kx1 = conv_bn(cin, cout, (k, 1), stride, (p, 0))
        self.branch_1xk = conv_bn(cin, cout, (1, k), stride, (0, p))

    def forward(self, x):
        return self.branch_kxk(x) + self.branch_kx1(x) + self.branch_1xk(x)

    def fuse(self) -> FusedConvParams:
        return acb_fuse(self)


def acb_fuse(block: ACBlock) -> FusedConvParams:
    """Equivalent single k x k conv of an eval-mode :class:`ACBlock`."""
    weight, bias = 0, 0
    for branch in (block.branch_kxk, block.branch_kx1, block.branch_1xk):
        kern, b = fold_bn(branch[0].weight, branch[1])
        weight = weight + pad_to(kern, block.k)
        bias = bias + b
    return FusedConvParams(weight.detach().clone(), bias.detach().clone())


REP_BLOCKS = (DiverseBranchBlock, ACBlock)
