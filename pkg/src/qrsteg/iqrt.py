"""Invertible QR transition: a conditional coupling network over QR images.

The host image conditions every sub-network but is never itself rewritten,
so the inverse is exact whenever it receives the same conditioning image as
the forward pass.  At decode time the distorted stego image stands in for the
unknown host.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .qr_codec import ModuleMatrix, binarize, scan_simulate, to_native


class ConvSubnet(nn.Module):
    """Three 3x3 conv layers with a residual middle layer; last layer starts at zero."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = h + F.leaky_relu(self.conv2(h), 0.2)
        return self.conv3(h)


class CouplingBlock(nn.Module):
    """Affine coupling over a 1/2 channel split of the QR image, conditioned on the host.

    ``pivot`` selects which QR channel forms the single-channel half.
    """

    def __init__(self, pivot: int = 0, hidden: int = 32, scale_max: float = 2.0, channels: int = 3):
        super().__init__()
        self.pivot = pivot
        self.rest = [c for c in range(channels) if c != pivot]
        self.scale_max = scale_max
        n_rest = len(self.rest)
        self.phi = ConvSubnet(n_rest + channels, 1, hidden)
        self.rho = ConvSubnet(1 + channels, n_rest, hidden)
        self.eta = ConvSubnet(1 + channels, n_rest, hidden)

    def _scale(self, a, cond):
        return self.scale_max * torch.tanh(self.rho(torch.cat([a, cond], 1)))

    def _split(self, q):
        return q[:, self.pivot : self.pivot + 1], q[:, self.rest]

    def _merge(self, a, b):
        parts = [None] * (1 + len(self.rest))
        parts[self.pivot] = a
        for i, c in enumerate(self.rest):
            parts[c] = b[:, i : i + 1]
        return torch.cat(parts, 1)

    def forward(self, q, cond):
        a, b = self._split(q)
        a = a + self.phi(torch.cat([b, cond], 1))
        b = b * torch.exp(self._scale(a, cond)) + self.eta(torch.cat([a, cond], 1))
        return self._merge(a, b)

    def inverse(self, q, cond):
        a, b = self._split(q)
        b = (b - self.eta(torch.cat([a, cond], 1))) * torch.exp(-self._scale(a, cond))
        a = a - self.phi(torch.cat([b, cond], 1))
        return self._merge(a, b)


class TransitionNet(nn.Module):
    def __init__(self, n_blocks: int = 2, hidden: int = 32, scale_max: float = 2.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            CouplingBlock(pivot=i % 3, hidden=hidden, scale_max=scale_max) for i in range(n_blocks)
        )

    @staticmethod
    def _batched(qr, cond):
        if qr.shape != cond.shape:
            raise ShapeMismatch(f"QR image {tuple(qr.shape)} and conditioning {tuple(cond.shape)} differ")
        if qr.dim() == 3:
            return qr.unsqueeze(0), cond.unsqueeze(0), True
        if qr.dim() != 4 or qr.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, H, W) images, got {tuple(qr.shape)}")
        return qr, cond, False

    def forward(self, qr: torch.Tensor, host: torch.Tensor) -> torch.Tensor:
        """Transformed QR image ``f(qr, host)``."""
        q, h, squeeze = self._batched(qr, host)
        for block in self.blocks:
            q = block(q, h)
        return q[0] if squeeze else q

    def inverse(self, qr_star: torch.Tensor, conditioning: torch.Tensor) -> torch.Tensor:
        q, h, squeeze = self._batched(qr_star, conditioning)
        for block in reversed(self.blocks):
            q = block.inverse(q, h)
        return q[0] if squeeze else q


def transition_forward(net: TransitionNet, qr: torch.Tensor, host: torch.Tensor) -> torch.Tensor:
    return net(qr, host)


def transition_inverse(net: TransitionNet, qr_star: torch.Tensor, conditioning: torch.Tensor) -> torch.Tensor:
    return net.inverse(qr_star, conditioning)


TruthLike = Union[ModuleMatrix, Sequence[ModuleMatrix], torch.Tensor]


def _truth_grid(truth: TruthLike, device, dtype) -> torch.Tensor:
    if isinstance(truth, ModuleMatrix):
        grid = torch.from_numpy(truth.modules)
    elif isinstance(truth, torch.Tensor):
        grid = truth
    else:
        grid = torch.from_numpy(np.stack([m.modules for m in truth]))
    return grid.to(device=device, dtype=dtype)


def transition_loss(
    qr_star: torch.Tensor, truth: TruthLike, k: float = 0.02, kernel_size: int = 5
) -> torch.Tensor:
    """Masked L1 between scan maps of the transformed and original codes.

    Only modules that the binarized scan reads wrongly contribute; the error
    mask carries no gradient.  Mean-reduced over modules (and batch), so one
    fully wrong module on a v5 code gives ``1 / 37**2``.
    """
    grid = _truth_grid(truth, qr_star.device, qr_star.dtype)
    n = grid.shape[-1]
    scan = scan_simulate(to_native(qr_star, n, kernel_size), kernel_size)
    if scan.dim() == 3 and grid.dim() == 2:
        grid = grid.expand_as(scan)
    xi = (binarize(scan.detach(), k).to(grid.dtype) != grid).to(scan.dtype)
    # a clean render scans to exactly its module values
    return (scan * xi - grid * xi).abs().mean()
