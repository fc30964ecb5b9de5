"""Invertible token fusion: a learnable N x N mixing of token rows."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .errors import ShapeMismatch, SingularMatrix

# above this the solve is treated as singular
_SINGULAR_COND = 1e12


def orthogonal_init(n: int, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Random rotation: Q factor of a Gaussian matrix, sign-fixed so det = +1."""
    a = torch.randn(n, n, generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    if torch.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q.to(dtype)


class TokenFusion(nn.Module):
    def __init__(self, n_tokens: int, learnable: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        init = orthogonal_init(n_tokens, generator) if learnable else torch.eye(n_tokens)
        self.M = nn.Parameter(init, requires_grad=learnable)

    @property
    def n_tokens(self) -> int:
        return self.M.shape[0]

    def _check(self, tokens):
        if tokens.dim() < 2 or tokens.shape[-2] != self.n_tokens:
            raise ShapeMismatch(f"expected (..., {self.n_tokens}, D) tokens, got {tuple(tokens.shape)}")

    def fuse(self, tokens: torch.Tensor) -> torch.Tensor:
        self._check(tokens)
        return self.M @ tokens

    def unfuse(self, tokens: torch.Tensor) -> torch.Tensor:
        """Solve ``M x = tokens``; the inverse is never stored."""
        self._check(tokens)
        cond = self.condition_number()
        if not torch.isfinite(torch.tensor(cond)) or cond > _SINGULAR_COND:
            raise SingularMatrix(f"fusion matrix is singular (cond={cond:.3g})")
        m = self.M.to(tokens.dtype)
        out, info = torch.linalg.solve_ex(m, tokens)
        if torch.any(info != 0):
            raise SingularMatrix("LU factorisation of the fusion matrix failed")
        return out

    def condition_number(self) -> float:
        with torch.no_grad():
            s = torch.linalg.svdvals(self.M.double())
            return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")

    forward = fuse
