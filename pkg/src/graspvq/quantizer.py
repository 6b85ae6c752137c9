"""Vector-quantization bottleneck: codebook, nearest-code assignment and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .substrate import Tensor, stop_gradient


class Codebook(nn.Module):
    """K learnable embeddings of dimension D."""

    def __init__(self, K: int = 512, D: int = 64, generator: torch.Generator | None = None):
        super().__init__()
        if K < 2 or D < 1:
            raise ValueError(f"codebook needs K >= 2 and D >= 1, got K={K}, D={D}")
        init = (torch.rand(K, D, generator=generator) * 2 - 1) / K
        self.embeddings = nn.Parameter(init)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def D(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_tensor(cls, embeddings) -> "Codebook":
        e = torch.as_tensor(embeddings)
        if not e.is_floating_point():
            e = e.float()
        cb = cls(e.shape[0], e.shape[1])
        cb.embeddings = nn.Parameter(e.clone())
        return cb


@dataclass
class QuantizationResult:
    z_q: Tensor
    indices: Tensor
    codebook_loss: Tensor
    commitment_loss: Tensor


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Return ``z_q`` whose incoming gradient is handed to ``z_e`` unchanged.

    Nothing flows back into ``z_q`` (hence none into the codebook) along this
    path.
    """
    if z_e.shape != z_q.shape:
        raise ValueError(f"straight-through shapes differ: {tuple(z_e.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z_e, z_q)


def nearest_codes(flat: Tensor, embeddings: Tensor) -> Tensor:
    """Index of the nearest embedding for each row of ``flat`` (ties -> lowest)."""
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion, which
    # rounds differently from a brute-force scan near ties
    d = torch.cdist(flat.unsqueeze(0), embeddings.unsqueeze(0),
                    compute_mode="donot_use_mm_for_euclid_dist")[0]
    return torch.argmin(d, dim=1)


def quantize(z_e: Tensor, codebook) -> QuantizationResult:
    """Replace each spatial vector of ``z_e`` (D x h x w or B x D x h x w) by its nearest code."""
    emb = codebook.embeddings if isinstance(codebook, Codebook) else torch.as_tensor(codebook)
    batched = z_e.dim() == 4
    if not batched:
        if z_e.dim() != 3:
            raise ValueError(f"z_e must be D x h x w or B x D x h x w, got {tuple(z_e.shape)}")
        z_e = z_e.unsqueeze(0)
    B, D, h, w = z_e.shape
    if D != emb.shape[1]:
        raise ValueError(f"z_e channel dimension {D} does not match codebook dimension {emb.shape[1]}")
    flat = z_e.permute(0, 2, 3, 1).reshape(-1, D)
    idx = nearest_codes(stop_gradient(flat), stop_gradient(emb))
    selected = emb[idx]
    codebook_loss = ((stop_gradient(flat) - selected) ** 2).sum(dim=1).mean()
    commitment_loss = ((flat - stop_gradient(selected)) ** 2).sum(dim=1).mean()
    z_q = stop_gradient(selected).reshape(B, h, w, D).permute(0, 3, 1, 2).contiguous()
    indices = idx.reshape(B, h, w)
    if not batched:
        z_q, indices = z_q[0], indices[0]
    return QuantizationResult(z_q, indices, codebook_loss, commitment_loss)


def vq_loss(recon_loss, codebook_loss, commitment_loss, beta: float = 0.25):
    """Reconstruction + dictionary + beta-weighted commitment terms."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return recon_loss + codebook_loss + beta * commitment_loss


def kl_constant(K: int) -> float:
    """KL divergence of a one-hot posterior from a uniform prior over K codes.

    Constant in the weights, so it is only ever reported, never optimized.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    return math.log(K)


def perplexity(indices, K: int) -> float:
    """exp(entropy) of the empirical code-usage distribution."""
    idx = torch.as_tensor(indices).reshape(-1).long()
    if idx.numel() and (idx.min() < 0 or idx.max() >= K):
        raise ValueError("code index out of range")
    counts = torch.bincount(idx, minlength=K).double()
    p = counts / counts.sum()
    p = p[p > 0]
    return float(torch.exp(-(p * p.log()).sum()))
