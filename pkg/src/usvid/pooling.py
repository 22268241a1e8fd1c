"""Mask-aware pooling over unordered frame embeddings.

All functions accept embeddings shaped ``(..., T, D)`` with a validity mask
``(..., T)``; the leading dims are treated as a batch. Frames whose mask is 0
are never read: their values cannot influence the output and receive exactly
zero gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


class EmptyClipError(ValueError):
    """A clip (or batch row) has no valid frames."""


@dataclass
class AttentionRecord:
    """Per-clip attention diagnostics: raw scores and normalized weights, ``(..., N_a, T)``."""

    scores: Tensor
    weights: Tensor
    mask: Tensor

    @property
    def n_heads(self) -> int:
        return self.weights.shape[-2]

    def detach(self) -> "AttentionRecord":
        return AttentionRecord(self.scores.detach(), self.weights.detach(), self.mask.detach())

    def unbatch(self) -> list["AttentionRecord"]:
        """Split a batched record into one record per clip, cropped to its valid frames."""
        out = []
        for s, w, m in zip(self.scores, self.weights, self.mask):
            n = int(m.sum())
            out.append(AttentionRecord(s[:, :n], w[:, :n], m[:n]))
        return out


def _check_mask(mask: Tensor) -> Tensor:
    mask = mask.bool()
    if not bool(mask.any(dim=-1).all()):
        raise EmptyClipError("all frames masked: clip has no valid frames")
    return mask


def partition(embeddings: Tensor, n_heads: int) -> Tensor:
    """View ``(..., T, D)`` as ``(..., T, N_a, d_a)``; partition i holds channels ``[i*d_a, (i+1)*d_a)``."""
    d = embeddings.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ValueError(f"number of heads {n_heads} does not divide embedding width {d}")
    return embeddings.reshape(*embeddings.shape[:-1], n_heads, d // n_heads)


def masked_softmax(scores: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last axis restricted to valid positions; masked positions get exactly 0.

    ``mask`` must broadcast against ``scores``. Stabilized by subtracting the
    maximum over valid positions only.
    """
    mask = _check_mask(mask).expand_as(scores)
    lowest = torch.finfo(scores.dtype).min
    shift = torch.where(mask, scores, torch.full_like(scores, lowest)).amax(dim=-1, keepdim=True)
    shifted = torch.where(mask, scores - shift.detach(), torch.zeros_like(scores))
    z = torch.where(mask, torch.exp(shifted), torch.zeros_like(scores))
    return z / z.sum(dim=-1, keepdim=True)


def attention_pool(
    embeddings: Tensor, queries: Tensor, mask: Tensor, scale: bool = False
) -> tuple[Tensor, AttentionRecord]:
    """Multi-head attention pooling with global queries.

    ``embeddings`` is ``(..., T, D)``, ``queries`` is ``(N_a, d_a)``. For each head
    i the score of frame t is the dot product of the frame's i-th partition with
    query i, scores are softmax-normalized over valid frames, and the head output
    is the weighted sum of partitions. Head outputs are concatenated back to D.
    """
    n_heads, d_a = queries.shape
    mask = _check_mask(mask)
    h = partition(embeddings, n_heads)                       # (..., T, Na, da)
    if h.shape[-1] != d_a:
        raise ValueError(f"query width {d_a} != partition width {h.shape[-1]}")
    scores = torch.einsum("...tnd,nd->...nt", h, queries)    # (..., Na, T)
    if scale:
        scores = scores / math.sqrt(d_a)
    weights = masked_softmax(scores, mask.unsqueeze(-2))
    pooled = torch.einsum("...nt,...tnd->...nd", weights, h)
    out = pooled.reshape(*pooled.shape[:-2], n_heads * d_a)
    return out, AttentionRecord(scores, weights, mask)


def average_pool(embeddings: Tensor, mask: Tensor) -> Tensor:
    mask = _check_mask(mask)
    m = mask.unsqueeze(-1)
    total = torch.where(m, embeddings, torch.zeros_like(embeddings)).sum(dim=-2)
    return total / mask.sum(dim=-1, keepdim=True).to(embeddings.dtype)


def max_pool(embeddings: Tensor, mask: Tensor) -> Tensor:
    """Channel-wise max over valid frames; ties resolve (and route gradient) to the lowest frame index."""
    mask = _check_mask(mask)
    lowest = torch.finfo(embeddings.dtype).min
    filled = torch.where(mask.unsqueeze(-1), embeddings, torch.full_like(embeddings, lowest))
    idx = filled.detach().argmax(dim=-2, keepdim=True)
    # argmax returns the first maximal index
    return torch.gather(embeddings, -2, idx).squeeze(-2)


class AttentionPool(nn.Module):
    """Holds the query bank ``q`` (N_a x d_a), initialized N(0, 1/d_a)."""

    def __init__(self, embed_dim: int, n_heads: int, scale: bool = False):
        super().__init__()
        if n_heads < 1 or embed_dim % n_heads:
            raise ValueError(f"number of heads {n_heads} does not divide embedding width {embed_dim}")
        self.n_heads = n_heads
        self.d_a = embed_dim // n_heads
        self.scale = scale
        self.queries = nn.Parameter(torch.randn(n_heads, self.d_a) / math.sqrt(self.d_a))

    def forward(self, embeddings: Tensor, mask: Tensor) -> tuple[Tensor, AttentionRecord]:
        return attention_pool(embeddings, self.queries, mask, scale=self.scale)
