"""Experiment drivers shared by the CLI and the acceptance suite.

A *cell* is one (model, training-set size, seed) training run evaluated on a
held-out split. The sample-efficiency sweep subsamples whole train groups
(nested across counts for a fixed seed) and always evaluates on the full
validation/test splits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import Manifest, VideoClip, subsample_clip_groups
from .encoder import EncoderConfig
from .model import AnyConfig, ModelConfig, TemporalBaselineConfig
from .train import FitResult, TrainConfig, fit, predict

log = logging.getLogger(__name__)

MODEL_NAMES = ("usvn", "avg", "max", "temporal")
_POOLING = {"usvn": "attention", "avg": "average", "max": "max"}


@dataclass
class Splits:
    train: list[VideoClip]
    val: list[VideoClip]
    test: list[VideoClip]

    @classmethod
    def from_clips(cls, clips: Sequence[VideoClip]) -> "Splits":
        by = {s: [c for c in clips if c.split == s] for s in ("train", "val", "test")}
        return cls(by["train"], by["val"], by["test"])

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "Splits":
        return cls(manifest.load_split("train"), manifest.load_split("val"),
                   manifest.load_split("test"))

    def train_groups(self) -> list[str]:
        return sorted({c.group_id for c in self.train})

    def get(self, name: str) -> list[VideoClip]:
        return getattr(self, name)


def head_for_task(task: str) -> str:
    return "ef_volumes" if task == "area_ratio" else "binary_logit"


def model_config(name: str, head: str, encoder: EncoderConfig | None = None, n_heads: int = 16,
                 dropout: float = 0.5, temporal: TemporalBaselineConfig | None = None) -> AnyConfig:
    """Config for one of the named models: usvn, avg, max or temporal."""
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    if name == "temporal":
        base = temporal or TemporalBaselineConfig()
        enc = encoder or EncoderConfig()
        return replace(base, head=head, dropout=dropout, in_channels=enc.in_channels,
                       image_size=enc.image_size)
    return ModelConfig(encoder=encoder or EncoderConfig(), n_heads=n_heads if name == "usvn" else 1,
                       pooling=_POOLING[name], head=head, dropout=dropout)


@dataclass
class CellResult:
    model: str
    n_groups: int
    seed: int
    val_metric: float
    test_metric: float
    fit: FitResult


def run_cell(name: str, cfg: AnyConfig, train_cfg: TrainConfig, splits: Splits,
             n_groups: int | None = None, seed: int = 0, out_dir: str | Path | None = None) -> CellResult:
    """Train ``cfg`` on (a group subsample of) the train split and score val and test."""
    train = splits.train
    if n_groups is not None and n_groups < len(splits.train_groups()):
        train = subsample_clip_groups(train, count=n_groups, seed=seed)
    n_used = len({c.group_id for c in train})
    res = fit(cfg, replace(train_cfg, seed=seed), train, splits.val, out_dir)
    val = predict(res.model, splits.val, train_cfg.eval_batch_size).metric
    test = predict(res.model, splits.test, train_cfg.eval_batch_size).metric if splits.test else float("nan")
    log.info("cell %s groups=%d seed=%d val=%.4f test=%.4f", name, n_used, seed, val, test)
    return CellResult(name, n_used, seed, val, test, res)


def sweep_samples(configs: dict[str, AnyConfig], train_cfg: TrainConfig, splits: Splits,
                  group_counts: Sequence[int], seeds: Sequence[int] = (0, 1, 2),
                  out_dir: str | Path | None = None) -> list[CellResult]:
    n_avail = len(splits.train_groups())
    bad = [c for c in group_counts if c < 1 or c > n_avail]
    if bad:
        raise ValueError(f"group counts {bad} outside [1, {n_avail}]")
    out = []
    for name, cfg in configs.items():
        for count in group_counts:
            for seed in seeds:
                cell_dir = None if out_dir is None else Path(out_dir) / f"{name}_g{count}_s{seed}"
                out.append(run_cell(name, cfg, train_cfg, splits, count, seed, cell_dir))
    return out


def sweep_heads(base: ModelConfig, heads: Sequence[int], train_cfg: TrainConfig, splits: Splits,
                seeds: Sequence[int] = (0, 1, 2), out_dir: str | Path | None = None) -> list[CellResult]:
    d = base.encoder.embed_dim
    bad = [h for h in heads if h < 1 or d % h]
    if bad:
        raise ValueError(f"head counts {bad} do not divide embed_dim {d}")
    out = []
    for h in heads:
        cfg = replace(base, n_heads=h)
        for seed in seeds:
            cell_dir = None if out_dir is None else Path(out_dir) / f"heads{h}_s{seed}"
            out.append(run_cell(f"usvn_h{h}", cfg, train_cfg, splits, None, seed, cell_dir))
    return out


def mean_by(results: Sequence[CellResult], key, field: str = "test_metric") -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault(key(r), []).append(getattr(r, field))
    return {k: float(np.mean(v)) for k, v in groups.items()}
