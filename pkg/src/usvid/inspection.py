"""Attention-head interpretability: entropy ranking and prototype frames.

Prototype frames are ranked across clips by the raw score (partition . query),
because the softmax-normalized weights are only comparable within a clip.
Both values are reported.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import VideoClip, write_clip
from .metrics import attention_entropy
from .pooling import AttentionRecord

log = logging.getLogger(__name__)
PROTOTYPE_FIELDS = ("head", "rank", "clip_id", "frame_index", "score", "weight", "entropy")


@dataclass(frozen=True)
class PrototypeRow:
    head: int
    rank: int
    clip_id: str
    frame_index: int
    score: float
    weight: float
    entropy: float


def _np(x) -> np.ndarray:
    return np.asarray(getattr(x, "detach", lambda: x)(), dtype=np.float64)


def _valid(rec: AttentionRecord) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(getattr(rec.mask, "detach", lambda: rec.mask)(), dtype=bool)
    return _np(rec.scores)[:, m], _np(rec.weights)[:, m]


def rank_heads_by_entropy(records: Sequence[AttentionRecord]) -> list[tuple[int, float]]:
    """Heads ordered by mean per-clip temporal entropy, lowest first; ties keep head order."""
    if not records:
        raise ValueError("no attention records")
    n_heads = {r.n_heads for r in records}
    if len(n_heads) != 1:
        raise ValueError(f"records disagree on number of heads: {sorted(n_heads)}")
    ent = np.mean([attention_entropy(r) for r in records], axis=0)
    return sorted(((int(h), float(e)) for h, e in enumerate(ent)), key=lambda he: (he[1], he[0]))


def top_attention_frames(records: Sequence[AttentionRecord], clip_ids: Sequence[str], head: int,
                         k: int = 10, head_entropy: float = float("nan")) -> list[PrototypeRow]:
    """The ``k`` frames across all clips with the largest score for ``head``.

    Ties are broken by ``(clip_id, frame_index)``. Fewer than ``k`` rows come
    back when the batch holds fewer valid frames.
    """
    if not records:
        raise ValueError("empty batch")
    if len(records) != len(clip_ids):
        raise ValueError("need one clip id per record")
    if not 0 <= head < records[0].n_heads:
        raise ValueError(f"head {head} out of range for {records[0].n_heads} heads")
    cand = []
    for rec, cid in zip(records, clip_ids):
        s, w = _valid(rec)
        for t in range(s.shape[1]):
            cand.append((-s[head, t], cid, t, w[head, t]))
    cand.sort(key=lambda c: (c[0], c[1], c[2]))
    if k > len(cand):
        log.warning("requested top-%d frames but only %d exist", k, len(cand))
    return [
        PrototypeRow(head, rank, cid, t, -neg, float(w), head_entropy)
        for rank, (neg, cid, t, w) in enumerate(cand[:k])
    ]


def prototype_report(records: Sequence[AttentionRecord], clip_ids: Sequence[str],
                     n_heads: int = 4, k: int = 10) -> list[PrototypeRow]:
    """Top-``k`` frames for each of the ``n_heads`` lowest-entropy heads."""
    rows: list[PrototypeRow] = []
    for head, ent in rank_heads_by_entropy(records)[:n_heads]:
        rows.extend(top_attention_frames(records, clip_ids, head, k, ent))
    return rows


def write_prototypes(rows: Sequence[PrototypeRow], clips: Mapping[str, VideoClip],
                     out_dir: str | Path) -> Path:
    """Write ``prototypes.csv`` and one single-frame ClipFile per row under ``frames/``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    path = out / "prototypes.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PROTOTYPE_FIELDS)
        for r in rows:
            wr.writerow(astuple(r))
            frame = clips[r.clip_id].frames[r.frame_index:r.frame_index + 1]
            write_clip(frame, out / "frames" / f"head{r.head:03d}_rank{r.rank:02d}.usvc")
    return path
