"""Evaluation metrics: ROC AUC, r^2 and attention entropy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import rankdata

ENTROPY_LOG_BASE = "e"


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(tie), via average-rank summation."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s, method="average")
    # integer-valued numerator times 2 keeps the ratio exact
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def r_squared(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("preds and targets differ in length")
    if t.size < 2:
        raise ValueError("r_squared needs at least two targets")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("targets have zero variance")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def attention_entropy(weights, mask=None, tol: float = 1e-4) -> np.ndarray:
    """Shannon entropy (nats) of each head's weights over valid frames; ``0 log 0 = 0``.

    ``weights`` is N_a x T (or an :class:`~usvid.pooling.AttentionRecord`).
    """
    if hasattr(weights, "weights"):
        mask = weights.mask if mask is None else mask
        weights = weights.weights
    w = np.asarray(getattr(weights, "detach", lambda: weights)(), dtype=np.float64)
    if w.ndim == 1:
        w = w[None]
    if mask is not None:
        m = np.asarray(getattr(mask, "detach", lambda: mask)(), dtype=bool)
        w = np.where(m[None, :], w, 0.0)
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise ValueError("attention weights are not normalized per head")
    logw = np.log(np.where(w > 0, w, 1.0))
    return -(w * logw).sum(axis=-1)


@dataclass
class EvalReport:
    task: str
    metric_name: str
    metric_value: float
    split: str
    predictions: list[dict[str, Any]] = field(default_factory=list)
    head_entropy: list[float] | None = None
    loss: float | None = None
    entropy_log_base: str = ENTROPY_LOG_BASE

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "split": self.split,
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "loss": self.loss,
            "entropy_log_base": self.entropy_log_base,
            "head_entropy": self.head_entropy,
            "predictions": self.predictions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)
