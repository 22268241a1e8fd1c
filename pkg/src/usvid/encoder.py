"""Per-frame CNN encoder: frames -> D-dimensional embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import diffcore


@dataclass
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 32
    embed_dim: int = 256
    widths: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{len(self.widths)}"
            )
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ValueError("embed_dim and in_channels must be positive")


@dataclass
class FrameEmbeddings:
    values: Tensor          # B x T x D
    mask: Tensor            # B x T


def init_conv_(conv: nn.Module) -> None:
    nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class FrameEncoder(nn.Module):
    """Conv(3x3, stride 2) + ReLU blocks, global average pool, linear projection to D.

    Frames are encoded independently; padded (masked) frames are skipped and
    their embedding rows are left at zero.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.widths
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])
        )
        for c in self.convs:
            init_conv_(c)
        self.proj = nn.Linear(chans[-1], cfg.embed_dim)

    def embed(self, images: Tensor) -> Tensor:
        """Encode an ``N x C x H x W`` stack of frames into ``N x D``."""
        x = (images - 0.5) * 2.0
        for conv in self.convs:
            x = torch.relu(diffcore.conv2d(x, conv.weight, conv.bias, stride=2, padding=1))
        return self.proj(x.mean(dim=(-2, -1)))

    def forward(self, frames: Tensor, mask: Tensor | None = None) -> FrameEmbeddings:
        if frames.dim() != 5:
            raise ValueError(f"expected B x T x C x H x W frames, got shape {tuple(frames.shape)}")
        b, t, c, h, w = frames.shape
        cfg = self.cfg
        if b == 0 or t == 0:
            raise ValueError("empty batch")
        if (c, h, w) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"frame shape {(c, h, w)} does not match encoder "
                f"{(cfg.in_channels, cfg.image_size, cfg.image_size)}"
            )
        if mask is None:
            mask = torch.ones(b, t, dtype=torch.bool)
        mask = mask.bool()
        flat_mask = mask.reshape(-1)
        valid = frames.reshape(b * t, c, h, w)[flat_mask]
        emb = self.embed(valid)
        out = emb.new_zeros(b * t, cfg.embed_dim)
        out = out.index_put((flat_mask.nonzero().squeeze(-1),), emb)
        return FrameEmbeddings(out.reshape(b, t, cfg.embed_dim), mask)


def encode_frames(encoder: FrameEncoder, frames: Tensor, mask: Tensor | None = None,
                  mode: str = "eval") -> FrameEmbeddings:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    encoder.train(mode == "train")
    return encoder(frames, mask)
