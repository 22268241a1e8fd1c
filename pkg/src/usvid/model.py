"""Video-level models: the attention-pooling network, fixed-pooling variants,
the ejection-fraction volume head, and a toy factorized spatiotemporal baseline.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import diffcore
from .encoder import EncoderConfig, FrameEncoder, init_conv_
from .pooling import AttentionPool, AttentionRecord, average_pool, max_pool

POOLING_KINDS = ("attention", "average", "max")
HEAD_KINDS = ("binary_logit", "ef_volumes", "scalar_regression")
_HEAD_OUT = {"binary_logit": 1, "ef_volumes": 2, "scalar_regression": 1}
VOLUME_FLOOR = 0.1


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_heads: int = 16
    pooling: str = "attention"
    head: str = "binary_logit"
    dropout: float = 0.5
    attention_scale: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.pooling not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.pooling!r}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head!r}")
        if self.encoder.embed_dim % self.n_heads:
            raise ValueError(
                f"n_heads={self.n_heads} does not divide embed_dim={self.encoder.embed_dim}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TemporalBaselineConfig:
    in_channels: int = 3
    image_size: int = 32
    widths: tuple[int, ...] = (16, 32, 64)
    temporal_kernel: int = 3
    temporal_strides: tuple[int, ...] = (1, 2, 2)
    t_fix: int = 32
    head: str = "binary_logit"
    dropout: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.temporal_strides = tuple(int(s) for s in self.temporal_strides)
        if len(self.widths) != len(self.temporal_strides):
            raise ValueError("widths and temporal_strides must have equal length")
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError("image_size must be divisible by 2^(number of blocks)")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.t_fix < 1 or self.temporal_kernel < 1:
            raise ValueError("t_fix and temporal_kernel must be positive")


@dataclass
class Prediction:
    """Head outputs for a batch.

    ``raw`` holds the linear-layer outputs (B x 1 or B x 2). For the volume head
    ``esv``/``edv`` are the positive volumes and ``ef = 1 - esv/edv``.
    """

    kind: str
    raw: Tensor
    esv: Tensor | None = None
    edv: Tensor | None = None
    ef: Tensor | None = None

    @property
    def value(self) -> Tensor:
        """The per-clip scalar the loss and metrics consume (log-odds, ef, or y)."""
        if self.kind == "ef_volumes":
            return self.ef
        return self.raw[:, 0]

    def detach(self) -> "Prediction":
        d = lambda t: None if t is None else t.detach()
        return Prediction(self.kind, d(self.raw), d(self.esv), d(self.edv), d(self.ef))


def volume_head_map(y1: Tensor, y2: Tensor) -> tuple[Tensor, Tensor]:
    """Map unconstrained outputs to positive volumes: softplus(y) + 0.1."""
    return F.softplus(y1) + VOLUME_FLOOR, F.softplus(y2) + VOLUME_FLOOR


def ef_from_volumes(esv, edv):
    """Ejection fraction ``1 - esv / edv``; both volumes must be positive."""
    if not bool((torch.as_tensor(esv) > 0).all()) or not bool((torch.as_tensor(edv) > 0).all()):
        raise ValueError("volumes must be positive")
    return 1 - esv / edv


def make_prediction(kind: str, raw: Tensor) -> Prediction:
    if kind == "ef_volumes":
        esv, edv = volume_head_map(raw[:, 0], raw[:, 1])
        return Prediction(kind, raw, esv, edv, ef_from_volumes(esv, edv))
    return Prediction(kind, raw)


class USVN(nn.Module):
    """Frame encoder -> (attention | average | max) pooling -> dropout -> linear head."""

    time_ordered = False

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg.encoder)
        d = cfg.encoder.embed_dim
        self.pool = AttentionPool(d, cfg.n_heads, cfg.attention_scale) if cfg.pooling == "attention" else None
        self.head = nn.Linear(d, _HEAD_OUT[cfg.head])

    def forward(self, frames: Tensor, mask: Tensor | None = None,
                generator: torch.Generator | None = None) -> tuple[Prediction, AttentionRecord | None]:
        emb = self.encoder(frames, mask)
        record = None
        if self.cfg.pooling == "attention":
            pooled, record = self.pool(emb.values, emb.mask)
        elif self.cfg.pooling == "average":
            pooled = average_pool(emb.values, emb.mask)
        else:
            pooled = max_pool(emb.values, emb.mask)
        pooled = diffcore.dropout(pooled, self.cfg.dropout, self.training, generator)
        return make_prediction(self.cfg.head, self.head(pooled)), record


def usvn_forward(model: USVN, frames: Tensor, mask: Tensor | None = None, mode: str = "eval",
                 generator: torch.Generator | None = None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(frames, mask, generator)


def resample_indices(n_frames: int, t_fix: int) -> np.ndarray:
    """Uniform temporal resampling indices ``round(j (T-1) / (t_fix-1))``, j = 0..t_fix-1."""
    if n_frames < 1:
        raise ValueError("clip has no frames")
    if t_fix == 1:
        return np.zeros(1, dtype=np.int64)
    j = np.arange(t_fix, dtype=np.float64)
    return np.floor(j * (n_frames - 1) / (t_fix - 1) + 0.5).astype(np.int64)


class _FactorizedBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, t_stride: int):
        super().__init__()
        self.spatial = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.temporal = nn.Conv1d(c_out, c_out, k, stride=t_stride, padding=k // 2)
        self.t_stride = t_stride
        init_conv_(self.spatial)
        init_conv_(self.temporal)

    def forward(self, x: Tensor) -> Tensor:
        # x: B x T x C x H x W
        b, t, c, h, w = x.shape
        y = torch.relu(diffcore.conv2d(x.reshape(b * t, c, h, w), self.spatial.weight,
                                       self.spatial.bias, stride=2, padding=1))
        c2, h2, w2 = y.shape[1:]
        y = y.reshape(b, t, c2, h2, w2).permute(0, 3, 4, 2, 1).reshape(b * h2 * w2, c2, t)
        y = torch.relu(diffcore.conv1d(y, self.temporal.weight, self.temporal.bias,
                                       stride=self.t_stride, padding=self.temporal.padding[0]))
        t2 = y.shape[-1]
        return y.reshape(b, h2, w2, c2, t2).permute(0, 4, 3, 1, 2)


class TemporalBaseline(nn.Module):
    """(2+1)D-factorized toy video CNN consuming ordered clips of exactly ``t_fix`` frames."""

    time_ordered = True

    def __init__(self, cfg: TemporalBaselineConfig):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.widths
        self.blocks = nn.ModuleList(
            _FactorizedBlock(a, b, cfg.temporal_kernel, s)
            for a, b, s in zip(chans[:-1], chans[1:], cfg.temporal_strides)
        )
        self.head = nn.Linear(chans[-1], _HEAD_OUT[cfg.head])

    def forward(self, frames: Tensor, mask: Tensor | None = None,
                generator: torch.Generator | None = None) -> tuple[Prediction, None]:
        cfg = self.cfg
        if frames.dim() != 5 or frames.shape[1] != cfg.t_fix:
            raise ValueError(
                f"temporal baseline needs B x {cfg.t_fix} x C x H x W input, got {tuple(frames.shape)}"
            )
        if frames.shape[2:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(f"frame shape {tuple(frames.shape[2:])} does not match config")
        if mask is not None and not bool(mask.bool().all()):
            raise ValueError("temporal baseline does not accept padded frames; resample instead")
        x = (frames - 0.5) * 2.0
        for blk in self.blocks:
            x = blk(x)
        pooled = x.mean(dim=(1, 3, 4))
        pooled = diffcore.dropout(pooled, cfg.dropout, self.training, generator)
        return make_prediction(cfg.head, self.head(pooled)), None


def temporal_baseline_forward(model: TemporalBaseline, frames: Tensor, mask: Tensor | None = None,
                              mode: str = "eval", generator: torch.Generator | None = None) -> Prediction:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(frames, mask, generator)[0]


AnyConfig = ModelConfig | TemporalBaselineConfig


def config_to_dict(cfg: AnyConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["kind"] = "temporal" if isinstance(cfg, TemporalBaselineConfig) else "usvn"
    return d


def config_from_dict(d: dict[str, Any]) -> AnyConfig:
    d = dict(d)
    kind = d.pop("kind", "usvn")
    if kind == "temporal":
        return TemporalBaselineConfig(**d)
    if kind == "usvn":
        return ModelConfig(**d)
    raise ValueError(f"unknown model kind {kind!r}")


def build_model(cfg: AnyConfig, seed: int = 0) -> USVN | TemporalBaseline:
    """Instantiate a model with parameters drawn deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if isinstance(cfg, TemporalBaselineConfig):
            return TemporalBaseline(cfg)
        return USVN(cfg)


# --- checkpoint file -------------------------------------------------------
# magic "USVK" | u16 version | u32 len + config JSON (utf-8) | u32 n_tensors |
# per tensor: u16 len + name, u8 ndim, u32 dims..., float32 LE payload

CKPT_MAGIC = b"USVK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, cfg: AnyConfig | dict, params: dict[str, Tensor],
                    extra: dict | None = None) -> None:
    cfg_dict = cfg if isinstance(cfg, dict) else config_to_dict(cfg)
    header = json.dumps({"config": cfg_dict, "extra": extra or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(header)), header,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict, "OrderedDict[str, Tensor]", dict]:
    """Returns ``(config dict, named float32 tensors, extra metadata)``."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    buf = p.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(buf[off:off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    params: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        if off + 4 * count > len(buf):
            raise CheckpointError(f"truncated tensor payload for {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = torch.from_numpy(arr.astype(np.float32))
    return meta["config"], params, meta["extra"]


def load_model(path: str | Path) -> tuple[USVN | TemporalBaseline, dict]:
    cfg_dict, params, extra = load_checkpoint(path)
    model = build_model(config_from_dict(cfg_dict))
    model.load_state_dict(params)
    model.eval()
    return model, extra
