"""Decoupled cross-attention: a text branch plus a scaled image branch over separate keys/values."""

from __future__ import annotations

import math

import torch
from torch import nn

from ..core import ShapeError


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two dims."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def decoupled_cross_attention(q: torch.Tensor, k_text: torch.Tensor, v_text: torch.Tensor,
                              k_image: torch.Tensor, v_image: torch.Tensor,
                              scale: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Text-branch attention plus ``scale`` times image-branch attention.

    Shapes ``q: [..., m, d]``, ``k_text/v_text: [..., n_t, d]``, ``k_image/v_image: [..., n_i, d]``.
    ``scale`` is a number or a tensor broadcastable to the output (e.g. ``[batch, 1, 1]``).
    A plain-number scale of 0 skips the image branch, so the result is the text branch exactly.
    """
    d = q.shape[-1]
    for name, t in (("k_text", k_text), ("v_text", v_text), ("k_image", k_image), ("v_image", v_image)):
        if t.shape[-1] != d:
            raise ShapeError(f"{name} has inner dim {t.shape[-1]}, query has {d}")
    if k_text.shape[-2] != v_text.shape[-2] or k_image.shape[-2] != v_image.shape[-2]:
        raise ShapeError("keys and values of a branch must have the same number of rows")
    text = attention(q, k_text, v_text)
    if not isinstance(scale, torch.Tensor):
        if not math.isfinite(scale):
            raise ValueError("image scale must be finite")
        if scale == 0:
            return text
    return text + scale * attention(q, k_image, v_image)


def project_image_embedding(embedding: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                            n_tokens: int) -> torch.Tensor:
    """Linear map ``[..., d_img] -> [..., n_tokens, d]`` with ``weight: [n_tokens * d, d_img]``."""
    if weight.shape[0] % n_tokens:
        raise ShapeError(f"projector rows {weight.shape[0]} not divisible by n_tokens={n_tokens}")
    out = embedding @ weight.T
    if bias is not None:
        out = out + bias
    return out.reshape(*embedding.shape[:-1], n_tokens, weight.shape[0] // n_tokens)


class ImageProjection(nn.Module):
    def __init__(self, d_img: int, d_ctx: int, n_tokens: int = 4):
        super().__init__()
        self.n_tokens = n_tokens
        self.proj = nn.Linear(d_img, n_tokens * d_ctx)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return project_image_embedding(embedding, self.proj.weight, self.proj.bias, self.n_tokens)


class DecoupledCrossAttention(nn.Module):
    """Single-head cross-attention with separate key/value projections for text and image tokens."""

    def __init__(self, dim: int, d_text: int, d_image_ctx: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(d_text, dim, bias=False)
        self.to_v = nn.Linear(d_text, dim, bias=False)
        self.to_k_ip = nn.Linear(d_image_ctx, dim, bias=False)
        self.to_v_ip = nn.Linear(d_image_ctx, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, hidden: torch.Tensor, text_tokens: torch.Tensor, image_tokens: torch.Tensor,
                scale: float | torch.Tensor = 1.0) -> torch.Tensor:
        q = self.to_q(self.norm(hidden))
        out = decoupled_cross_attention(q, self.to_k(text_tokens), self.to_v(text_tokens),
                                        self.to_k_ip(image_tokens), self.to_v_ip(image_tokens), scale)
        return hidden + self.to_out(out)
