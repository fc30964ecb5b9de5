"""Token-space steganography flow: ViT tokenizers, detokenizers and attention coupling blocks.

Tokens are ``(B, N, D)`` tensors.  A block updates the host tokens additively
from the QR tokens (self-attention plus an alpha-weighted cross-attention
against the frozen conditioning tokens), then rescales and shifts the QR tokens
from the updated host tokens.  Normalisation only ever happens inside the
sub-networks, never on the coupling sum itself, so the inverse is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteValue, ShapeMismatch


@dataclass
class TokenizerConfig:
    patch_size: int = 16
    depth: int = 2
    token_dim: int = 768
    mlp_dim: int = 2048
    heads: int = 8


@dataclass
class FlowState:
    t_h: torch.Tensor
    t_q: torch.Tensor
    t_h0: torch.Tensor
    depth: int = 0

    def __post_init__(self):
        shapes = {tuple(t.shape[-2:]) for t in (self.t_h, self.t_q, self.t_h0)}
        if len(shapes) != 1:
            raise ShapeMismatch(f"flow state grids disagree on (N, D): {sorted(shapes)}")


class Attention(nn.Module):
    """Multi-head scaled dot-product attention; ``context=None`` means self-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def weights(self, x, context=None):
        q, k, _ = self._qkv(x, context)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def _qkv(self, x, context):
        context = x if context is None else context
        b, n, _ = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(context).view(b, context.shape[1], 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return q, k, v

    def forward(self, x, context=None):
        q, k, v = self._qkv(x, context)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TransformerBlock(nn.Module):
    """Pre-norm block; with ``cross=True`` attention queries ``x`` against a context."""

    def __init__(self, dim: int, mlp_dim: int, heads: int, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim) if cross else None
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x, context=None):
        ctx = None if self.norm_ctx is None else self.norm_ctx(context)
        x = x + self.attn(self.norm1(x), ctx)
        return x + self.mlp(self.norm2(x))


class Tokenizer(nn.Module):
    """Patch embedding + learned positional embedding + a few transformer blocks."""

    def __init__(self, image_side: int, cfg: TokenizerConfig):
        super().__init__()
        if image_side % cfg.patch_size:
            raise ShapeMismatch(f"image side {image_side} not divisible by patch size {cfg.patch_size}")
        self.image_side = image_side
        self.n_tokens = (image_side // cfg.patch_size) ** 2
        self.embed = nn.Conv2d(3, cfg.token_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.zeros(1, self.n_tokens, cfg.token_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.token_dim, cfg.mlp_dim, cfg.heads) for _ in range(cfg.depth)
        )

    def forward(self, img):
        if img.dim() == 3:
            img = img.unsqueeze(0)
        if img.shape[-2:] != (self.image_side, self.image_side):
            raise ShapeMismatch(f"tokenizer expects {self.image_side}px images, got {tuple(img.shape[-2:])}")
        x = self.embed(img).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x


class Detokenizer(nn.Module):
    """Bias-free MLP to per-patch features, reshape, then two GELU conv layers."""

    def __init__(self, image_side: int, cfg: TokenizerConfig, feat_ch: int = 16):
        super().__init__()
        self.image_side = image_side
        self.patch = cfg.patch_size
        self.grid = image_side // cfg.patch_size
        self.feat_ch = feat_ch
        self.mlp = nn.Sequential(
            nn.Linear(cfg.token_dim, cfg.mlp_dim, bias=False),
            nn.GELU(),
            nn.Linear(cfg.mlp_dim, feat_ch * cfg.patch_size**2, bias=False),
        )
        self.conv1 = nn.Conv2d(feat_ch, feat_ch, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(feat_ch, 3, 3, padding=1, padding_mode="replicate")

    def forward(self, tokens):
        b, n, _ = tokens.shape
        if n != self.grid**2:
            raise ShapeMismatch(f"detokenizer expects {self.grid ** 2} tokens, got {n}")
        p, g, c = self.patch, self.grid, self.feat_ch
        x = self.mlp(tokens).view(b, g, g, c, p, p).permute(0, 3, 1, 4, 2, 5).reshape(b, c, g * p, g * p)
        return self.conv2(F.gelu(self.conv1(x)))


class AttnSubnet(nn.Module):
    """Transformer block followed by a zero-initialised output projection."""

    def __init__(self, cfg: TokenizerConfig, cross: bool = False, bound: Optional[float] = None):
        super().__init__()
        self.block = TransformerBlock(cfg.token_dim, cfg.mlp_dim, cfg.heads, cross=cross)
        self.out = nn.Linear(cfg.token_dim, cfg.token_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.bound = bound

    def forward(self, x, context=None):
        y = self.out(self.block(x, context))
        return y if self.bound is None else self.bound * torch.tanh(y)


def _finite(state: FlowState, where: str) -> FlowState:
    if not (torch.isfinite(state.t_h).all() and torch.isfinite(state.t_q).all()):
        raise NonFiniteValue(f"non-finite tokens after {where} at depth {state.depth}")
    return state


class AACB(nn.Module):
    """Attention affine coupling block."""

    def __init__(self, cfg: TokenizerConfig, cross_attn: bool = True, alpha_init: float = 0.01,
                 scale_max: float = 2.0):
        super().__init__()
        self.phi = AttnSubnet(cfg)
        self.eta = AttnSubnet(cfg)
        self.rho = AttnSubnet(cfg, bound=scale_max)
        self.cross = AttnSubnet(cfg, cross=True) if cross_attn else None
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init) if cross_attn else 0.0),
                                  requires_grad=cross_attn)

    def _host_shift(self, t_q, t_h0):
        shift = self.phi(t_q)
        if self.cross is not None:
            shift = shift + self.alpha * self.cross(t_q, t_h0)
        return shift

    def forward(self, state: FlowState) -> FlowState:
        t_h = state.t_h + self._host_shift(state.t_q, state.t_h0)
        t_q = self.eta(t_h) + state.t_q * torch.exp(self.rho(t_h))
        return _finite(FlowState(t_h, t_q, state.t_h0, state.depth + 1), "forward")

    def inverse(self, state: FlowState) -> FlowState:
        t_q = (state.t_q - self.eta(state.t_h)) * torch.exp(-self.rho(state.t_h))
        t_h = state.t_h - self._host_shift(t_q, state.t_h0)
        return _finite(FlowState(t_h, t_q, state.t_h0, state.depth - 1), "inverse")


def aacb_forward(state: FlowState, block: AACB) -> FlowState:
    return block(state)


def aacb_inverse(state: FlowState, block: AACB) -> FlowState:
    return block.inverse(state)


def tokenize(img: torch.Tensor, tokenizer: Tokenizer) -> torch.Tensor:
    return tokenizer(img)


def detokenize(tokens: torch.Tensor, detokenizer: Detokenizer) -> torch.Tensor:
    return detokenizer(tokens)


class AttnFlow(nn.Module):
    """Conceal/reveal network.  Token fusion is passed in so it can live beside the flow."""

    def __init__(
        self,
        image_side: int = 224,
        cfg: Optional[TokenizerConfig] = None,
        aacb_count: int = 4,
        cross_attn: bool = True,
        alpha_init: float = 0.01,
        share_tokenizers: bool = False,
    ):
        super().__init__()
        cfg = cfg or TokenizerConfig()
        self.cfg = replace(cfg)
        self.image_side = image_side
        self.host_tokenizer = Tokenizer(image_side, cfg)
        self.qr_tokenizer = Tokenizer(image_side, cfg)
        self.stego_tokenizer = None if share_tokenizers else Tokenizer(image_side, cfg)
        self.stego_detokenizer = Detokenizer(image_side, cfg)
        self.qr_detokenizer = Detokenizer(image_side, cfg)
        self.blocks = nn.ModuleList(AACB(cfg, cross_attn, alpha_init) for _ in range(aacb_count))

    @property
    def n_tokens(self) -> int:
        return self.host_tokenizer.n_tokens

    def flow_forward(self, state: FlowState) -> FlowState:
        for block in self.blocks:
            state = block(state)
        return state

    def flow_inverse(self, state: FlowState) -> FlowState:
        for block in reversed(self.blocks):
            state = block.inverse(state)
        return state

    def conceal(self, host: torch.Tensor, qr_star: torch.Tensor, fusion=None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return the stego image and the residual QR tokens left after the last block."""
        if host.shape != qr_star.shape:
            raise ShapeMismatch(f"host {tuple(host.shape)} and QR {tuple(qr_star.shape)} differ")
        t_h0 = self.host_tokenizer(host)
        t_q = self.qr_tokenizer(qr_star)
        if fusion is not None:
            t_q = fusion.fuse(t_q)
        state = self.flow_forward(FlowState(t_h0, t_q, t_h0))
        stego = self.stego_detokenizer(state.t_h)
        return (stego if host.dim() == 4 else stego[0]), state.t_q

    def reveal(self, stego_distorted: torch.Tensor, rng_seed: int = 0, fusion=None) -> torch.Tensor:
        """Recover the (transformed) QR image; the lost residual is drawn from N(0, I)."""
        tokenizer = self.stego_tokenizer or self.host_tokenizer
        t_h = tokenizer(stego_distorted)
        gen = torch.Generator().manual_seed(int(rng_seed))
        z = torch.randn(t_h.shape, generator=gen, dtype=t_h.dtype).to(t_h.device)
        state = self.flow_inverse(FlowState(t_h, z, t_h, len(self.blocks)))
        t_q = state.t_q if fusion is None else fusion.unfuse(state.t_q)
        qr = self.qr_detokenizer(t_q)
        return qr if stego_distorted.dim() == 4 else qr[0]
