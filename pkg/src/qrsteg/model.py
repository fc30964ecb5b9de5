"""Joint model: QR transition + token fusion + attention flow."""

from __future__ import annotations

from typing import List, Optional

import torch
import torch.nn as nn

from .attnflow import AttnFlow, TokenizerConfig
from .config import ModelConfig
from .iqrt import TransitionNet
from .itf import TokenFusion
from .qr_codec import ModuleMatrix, read_modules


class StegoModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        tok = TokenizerConfig(cfg.patch_size, cfg.tokenizer_depth, cfg.token_dim, cfg.mlp_dim, cfg.heads)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.iqrt = TransitionNet(cfg.iqrt_blocks, cfg.iqrt_hidden)
            n_tokens = (cfg.image_side // cfg.patch_size) ** 2
            gen = torch.Generator().manual_seed(seed + 1)
            self.itf = TokenFusion(n_tokens, learnable=cfg.itf_on, generator=gen)
            self.attnflow = AttnFlow(cfg.image_side, tok, cfg.aacb_count, cfg.cross_attn_on, cfg.alpha_init,
                                     cfg.share_tokenizers)
        if not cfg.iqrt_on:
            self.iqrt.requires_grad_(False)

    @property
    def fusion(self) -> Optional[TokenFusion]:
        return self.itf if self.cfg.itf_on else None

    def transition(self, qr: torch.Tensor, host: torch.Tensor) -> torch.Tensor:
        return self.iqrt(qr, host) if self.cfg.iqrt_on else qr

    def embed(self, host: torch.Tensor, qr: torch.Tensor):
        """Return ``(stego, qr_star, residual_tokens)``."""
        qr_star = self.transition(qr, host)
        stego, residual = self.attnflow.conceal(host, qr_star, self.fusion)
        return stego, qr_star, residual

    def extract(self, distorted: torch.Tensor, seed: int = 0):
        """Return ``(restored_qr, restored_qr_star)``."""
        qr_star = self.attnflow.reveal(distorted, seed, self.fusion)
        restored = self.iqrt.inverse(qr_star, distorted) if self.cfg.iqrt_on else qr_star
        return restored, qr_star

    def read(self, restored: torch.Tensor) -> List[ModuleMatrix]:
        imgs = restored if restored.dim() == 4 else restored.unsqueeze(0)
        return [
            read_modules(img, self.cfg.qr_version, self.cfg.scan_kernel, self.cfg.read_threshold) for img in imgs
        ]
