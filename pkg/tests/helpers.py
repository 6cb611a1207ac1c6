"""Shared test utilities: BN randomization and a central-difference gradient check."""
import torch
from torch import nn


def randomize_bn(module: nn.Module, gen: torch.Generator) -> None:
    """Give every BN non-trivial affine parameters and running statistics."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                n = m.num_features
                m.weight.copy_(torch.rand(n, generator=gen) + 0.5)
                m.bias.copy_(torch.randn(n, generator=gen) * 0.2)
                m.running_mean.copy_(torch.randn(n, generator=gen) * 0.2)
                m.running_var.copy_(torch.rand(n, generator=gen) + 0.5)


def fd_relative_error(fn, tensors, h: float = 1e-6, max_coords: int = 40, seed: int = 0,
                      floor: float = 1e-3) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar and reads ``tensors`` (float64 leaves).
    Compares on up to ``max_coords`` random coordinates per tensor. Norms
    below ``floor`` count as zero, so structurally vanishing gradients (a bias
    feeding a batch-statistics BN) compare absolutely.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().reshape(-1).clone()
        flat = t.detach().view(-1)
        idx = torch.randperm(flat.numel(), generator=gen)[:max_coords]
        numeric = torch.empty(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                numeric[j] = (up - down) / (2 * h)
        a = analytic[idx]
        err = (a - numeric).norm() / max(a.norm().item(), numeric.norm().item(), floor)
        worst = max(worst, float(err))
    return worst
