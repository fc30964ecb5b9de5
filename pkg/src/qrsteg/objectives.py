"""Training losses and image-quality metrics.

All losses use mean reduction.  The SSIM loss is ``1 - SSIM`` so that
minimising it increases similarity.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .qr_codec import emr, tra  # noqa: F401  (re-exported metrics)

LOSS_KEYS = ("l1", "ssim", "lpips", "qr", "transition")


@dataclass
class LossWeights:
    alpha: float = 5.0  # L1
    beta: float = 0.2  # SSIM
    gamma: float = 3.5  # LPIPS
    delta: float = 16.0  # QR reconstruction
    epsilon: float = 3.0  # transition

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_map(self) -> dict:
        return dict(zip(LOSS_KEYS, (self.alpha, self.beta, self.gamma, self.delta, self.epsilon)))


def _batch(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def qr_loss(restored: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return l1_loss(restored, original)


def _ssim_window(size: int, sigma: float, dtype, device):
    ax = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_metric(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
                data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over channels and valid window positions (Gaussian window)."""
    a, b = _batch(a), _batch(b)
    c = a.shape[1]
    win = _ssim_window(window, sigma, a.dtype, a.device).expand(c, 1, window, window)
    filt = lambda x: F.conv2d(x, win, groups=c)  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return s.mean()


def ssim_loss(a, b) -> torch.Tensor:
    return 1 - ssim_metric(a, b)


class PerceptualDistance(nn.Module):
    """LPIPS-style distance: unit-normalised deep features, squared difference, spatial mean.

    ``backbone="random"`` uses a frozen conv stack with seeded weights;
    ``backbone="vgg16"`` loads torchvision VGG16 features from ``weights_path``.
    Layers are weighted uniformly (no learned linear heads).
    """

    def __init__(self, backbone: str = "random", seed: int = 0, weights_path: Optional[str] = None):
        super().__init__()
        self.backbone = backbone
        if backbone == "random":
            gen = torch.Generator().manual_seed(seed)
            widths = [(3, 16, 1), (16, 32, 2), (32, 64, 2)]
            self.stages = nn.ModuleList()
            for cin, cout, stride in widths:
                conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2 / (cin * 9)))
                    conv.bias.zero_()
                self.stages.append(nn.Sequential(conv, nn.ReLU()))
        elif backbone == "vgg16":
            from torchvision.models import vgg16

            net = vgg16(weights=None)
            if weights_path is None:
                raise ValueError("vgg16 backbone needs weights_path")
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            feats = net.features
            cuts = [4, 9, 16, 23, 30]
            self.stages = nn.ModuleList(nn.Sequential(*feats[s:e]) for s, e in zip([0] + cuts[:-1], cuts))
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, a, b):
        x, y = _batch(a) * 2 - 1, _batch(b) * 2 - 1
        total = 0.0
        for stage in self.stages:
            x, y = stage(x), stage(y)
            nx = x / (x.pow(2).sum(1, keepdim=True).add(1e-10).sqrt())
            ny = y / (y.pow(2).sum(1, keepdim=True).add(1e-10).sqrt())
            total = total + (nx - ny).pow(2).sum(1).mean()
        return total


_DEFAULT_LPIPS: dict = {}


def default_lpips(dtype=torch.float32) -> PerceptualDistance:
    if dtype not in _DEFAULT_LPIPS:
        _DEFAULT_LPIPS[dtype] = PerceptualDistance().to(dtype)
    return _DEFAULT_LPIPS[dtype]


def lpips_loss(a, b, net: Optional[PerceptualDistance] = None) -> torch.Tensor:
    net = net or default_lpips(a.dtype)
    return net(a, b)


def total_loss(components: Mapping[str, torch.Tensor], w: LossWeights = LossWeights()) -> torch.Tensor:
    weights = w.as_map()
    missing = set(weights) - set(components)
    if missing:
        raise KeyError(f"missing loss components: {sorted(missing)}")
    return sum(weights[k] * components[k] for k in LOSS_KEYS)


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``inf``."""
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)
