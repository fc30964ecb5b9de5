"""Differentiable print/photograph corruption for stego images.

A :class:`DistortionSpec` is one fully resolved draw of perturbation
parameters, with ``None`` meaning "stage disabled".  :func:`apply` runs the
enabled stages in a fixed order::

    warp -> color jitter -> blur -> noise -> JPEG -> clamp to [0, 1]
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError


@dataclass
class DistortionConfig:
    brightness_max: float = 0.3
    hue_max: float = 0.1
    saturation_max: float = 1.0
    contrast_range: Tuple[float, float] = (0.5, 1.5)
    jpeg_quality: int = 60
    noise_sigma: float = 0.07
    blur_kernel: int = 7
    blur_sigma_range: Tuple[float, float] = (1.0, 3.0)
    warp_frac: float = 0.02
    p_apply: float = 0.5

    def __post_init__(self):
        bounds = (self.brightness_max, self.hue_max, self.saturation_max, self.noise_sigma, self.warp_frac,
                  *self.contrast_range, *self.blur_sigma_range)
        if min(bounds) < 0:
            raise ValueError("distortion bounds must be non-negative")
        if self.contrast_range[0] > self.contrast_range[1] or self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ValueError("range low bound exceeds high bound")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must be in [1, 100]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")
        if not 0 <= self.p_apply <= 1:
            raise ValueError("p_apply must be a probability")


@dataclass
class DistortionSpec:
    # corner offsets as fractions of the side, order TL, TR, BR, BL, each (dx, dy)
    warp: Optional[Tuple[float, ...]] = None
    brightness: Optional[float] = None
    hue: Optional[float] = None
    saturation: Optional[float] = None
    contrast: Optional[float] = None
    blur_sigma: Optional[float] = None
    blur_kernel: int = 7
    noise_sigma: Optional[float] = None
    noise_seed: int = 0
    apply_jpeg: bool = False
    jpeg_quality: int = 100

    def is_identity(self) -> bool:
        return (
            all(getattr(self, k) is None for k in
                ("warp", "brightness", "hue", "saturation", "contrast", "blur_sigma", "noise_sigma"))
            and not self.apply_jpeg
        )

    def within(self, cfg: DistortionConfig) -> bool:
        eps = 1e-12
        checks = [
            self.warp is None or max(abs(v) for v in self.warp) <= cfg.warp_frac + eps,
            self.brightness is None or abs(self.brightness) <= cfg.brightness_max + eps,
            self.hue is None or abs(self.hue) <= cfg.hue_max + eps,
            self.saturation is None or 0 <= self.saturation <= cfg.saturation_max + eps,
            self.contrast is None or cfg.contrast_range[0] - eps <= self.contrast <= cfg.contrast_range[1] + eps,
            self.blur_sigma is None or cfg.blur_sigma_range[0] - eps <= self.blur_sigma <= cfg.blur_sigma_range[1] + eps,
            self.noise_sigma is None or 0 <= self.noise_sigma <= cfg.noise_sigma + eps,
            not self.apply_jpeg or cfg.jpeg_quality <= self.jpeg_quality <= 100,
        ]
        return all(checks)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "off"
            elif f.name == "warp":
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DistortionSpec":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"unknown distortion key {key!r}")
            if value == "off":
                kwargs[key] = None
            elif key == "warp":
                parts = tuple(float(x) for x in value.split(","))
                if len(parts) != 8:
                    raise FormatError("warp needs 8 comma-separated offsets")
                kwargs[key] = parts
            elif key == "apply_jpeg":
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in ("blur_kernel", "noise_seed", "jpeg_quality"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def sample_spec(cfg: DistortionConfig, seed: int) -> DistortionSpec:
    """Each stage is switched on independently with probability ``cfg.p_apply``."""
    rng = np.random.default_rng(seed)
    on = lambda: rng.random() < cfg.p_apply  # noqa: E731
    spec = DistortionSpec(blur_kernel=cfg.blur_kernel)
    # every draw happens regardless of the switch so the stream layout is fixed
    warp = tuple(rng.uniform(-cfg.warp_frac, cfg.warp_frac, 8).tolist())
    if on():
        spec.warp = warp
    draws = {
        "brightness": rng.uniform(-cfg.brightness_max, cfg.brightness_max),
        "hue": rng.uniform(-cfg.hue_max, cfg.hue_max),
        "saturation": rng.uniform(0, cfg.saturation_max),
        "contrast": rng.uniform(*cfg.contrast_range),
        "blur_sigma": rng.uniform(*cfg.blur_sigma_range),
        "noise_sigma": rng.uniform(0, cfg.noise_sigma),
    }
    for key, value in draws.items():
        if on():
            setattr(spec, key, float(value))
    quality = int(rng.integers(cfg.jpeg_quality, 101))
    if on():
        spec.apply_jpeg, spec.jpeg_quality = True, quality
    spec.noise_seed = int(rng.integers(0, 2**31 - 1))
    return spec


# ---------------------------------------------------------------------------
# stages


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 H with H @ [dst, 1] ~ [src, 1] for four point pairs."""
    a, b = [], []
    for (x, y), (u, v) in zip(dst, src):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def warp(img: torch.Tensor, offsets) -> torch.Tensor:
    """Projective warp moving the four corners by ``offsets`` (fractions of the side)."""
    b, _, h, w = img.shape
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    moved = corners + 2 * np.asarray(offsets, dtype=np.float64).reshape(4, 2)
    hm = torch.tensor(_homography(corners, moved), dtype=img.dtype, device=img.device)
    theta = torch.eye(2, 3, dtype=img.dtype, device=img.device).unsqueeze(0).expand(b, 2, 3)
    grid = F.affine_grid(theta, (b, 3, h, w), align_corners=False)
    ones = torch.ones_like(grid[..., :1])
    mapped = torch.cat([grid, ones], -1) @ hm.T
    mapped = mapped[..., :2] / mapped[..., 2:]
    return F.grid_sample(img, mapped, mode="bilinear", padding_mode="border", align_corners=False)


_LUMA = (0.3, 0.6, 0.1)
_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]],
                        dtype=torch.float64)


def hue_rotate(img: torch.Tensor, shift: float) -> torch.Tensor:
    """Rotate chroma in YIQ space by ``shift`` turns (linear stand-in for an HSV hue shift)."""
    angle = 2 * math.pi * shift
    c, s = math.cos(angle), math.sin(angle)
    rot = torch.tensor([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=torch.float64)
    m = torch.linalg.inv(_RGB2YIQ) @ rot @ _RGB2YIQ
    return torch.einsum("ij,bjhw->bihw", m.to(img.dtype).to(img.device), img)


def desaturate(img: torch.Tensor, amount: float) -> torch.Tensor:
    w = torch.tensor(_LUMA, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    lum = (img * w).sum(1, keepdim=True)
    return (1 - amount) * img + amount * lum


def gaussian_blur(img: torch.Tensor, sigma: float, kernel: int) -> torch.Tensor:
    ax = torch.arange(kernel, dtype=img.dtype, device=img.device) - (kernel - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    k2 = (g[:, None] * g[None, :]).expand(3, 1, kernel, kernel)
    pad = kernel // 2
    return F.conv2d(F.pad(img, (pad,) * 4, mode="reflect"), k2, groups=3)


_QT_Y = [
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99],
]
_QT_C = [[17, 18, 24, 47] + [99] * 4, [18, 21, 26, 66] + [99] * 4, [24, 26, 56] + [99] * 5,
         [47, 66] + [99] * 6] + [[99] * 8] * 4


def quant_tables(quality: int) -> Optional[torch.Tensor]:
    """libjpeg-scaled (Y, C, C) tables, or ``None`` when quality 100 disables quantisation."""
    quality = int(min(max(quality, 1), 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    if scale == 0:
        return None
    out = []
    for base in (_QT_Y, _QT_C, _QT_C):
        t = torch.floor((torch.tensor(base, dtype=torch.float64) * scale + 50) / 100)
        out.append(t.clamp(1, 255))
    return torch.stack(out)


def _dct_matrix(dtype, device) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    m = torch.cos((2 * k[None, :] + 1) * k[:, None] * math.pi / 16) * math.sqrt(2 / 8)
    m[0] /= math.sqrt(2)
    return m.to(dtype=dtype, device=device)


def _round_ste(x):
    return x + (torch.round(x) - x).detach()


def jpeg(img: torch.Tensor, quality: int) -> torch.Tensor:
    """JPEG (4:4:4) approximation with straight-through rounding of DCT coefficients."""
    tables = quant_tables(quality)
    b, _, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = F.pad(img, (0, pw, 0, ph), mode="replicate") * 255
    r, g, bl = x[:, 0], x[:, 1], x[:, 2]
    ycc = torch.stack([
        0.299 * r + 0.587 * g + 0.114 * bl,
        -0.168736 * r - 0.331264 * g + 0.5 * bl + 128,
        0.5 * r - 0.418688 * g - 0.081312 * bl + 128,
    ], 1) - 128
    if tables is not None:
        H, W = ycc.shape[-2:]
        blocks = ycc.view(b, 3, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)
        d = _dct_matrix(img.dtype, img.device)
        coef = d @ blocks @ d.T
        t = tables.to(img.dtype).to(img.device).view(1, 3, 1, 1, 8, 8)
        coef = _round_ste(coef / t) * t
        blocks = d.T @ coef @ d
        ycc = blocks.permute(0, 1, 2, 4, 3, 5).reshape(b, 3, H, W)
    y, cb, cr = ycc[:, 0] + 128, ycc[:, 1], ycc[:, 2]
    rgb = torch.stack([
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ], 1) / 255
    return rgb[:, :, :h, :w]


def apply(img: torch.Tensor, spec: DistortionSpec) -> torch.Tensor:
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    if spec.warp is not None:
        x = warp(x, spec.warp)
    if spec.contrast is not None:
        x = x * spec.contrast
    if spec.brightness is not None:
        x = x + spec.brightness
    if spec.hue is not None:
        x = hue_rotate(x, spec.hue)
    if spec.saturation is not None:
        x = desaturate(x, spec.saturation)
    if spec.blur_sigma is not None:
        x = gaussian_blur(x, spec.blur_sigma, spec.blur_kernel)
    if spec.noise_sigma is not None:
        gen = torch.Generator().manual_seed(spec.noise_seed)
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype).to(x.device)
        x = x + spec.noise_sigma * noise
    if spec.apply_jpeg:
        x = jpeg(x, spec.jpeg_quality)
    x = x.clamp(0, 1)
    return x[0] if squeeze else x


def apply_tamper(img: torch.Tensor, rate: float, seed: int) -> torch.Tensor:
    """Black out random axis-aligned squares until at least ``rate`` of the area is covered."""
    if not 0 <= rate <= 1:
        raise ValueError("tamper rate must be in [0, 1]")
    h, w = img.shape[-2:]
    mask = np.zeros((h, w), dtype=bool)
    target = rate * h * w
    rng = np.random.default_rng(seed)
    lo, hi = max(1, min(h, w) // 32), max(2, min(h, w) // 10)
    while mask.sum() < target:
        side = int(rng.integers(lo, hi + 1))
        remaining = target - mask.sum()
        if side * side > remaining:
            side = max(1, math.ceil(math.sqrt(remaining)))
        y, x = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
        mask[y : y + side, x : x + side] = True
    keep = torch.from_numpy(~mask).to(img.dtype).to(img.device)
    return img * keep
