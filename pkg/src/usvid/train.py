"""Losses, AdamW, the plateau/early-stopping policy, evaluation and the fit loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor
from torch.func import functional_call

from . import diffcore
from .dataio import VideoClip, collate, sample_frames, with_frames
from .metrics import attention_entropy, r_squared, roc_auc
from .model import AnyConfig, build_model, resample_indices, save_checkpoint
from .pooling import AttentionRecord

log = logging.getLogger(__name__)

CLASSIFICATION_LR = 3e-5
REGRESSION_LR = 1e-3
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "metric", "lr")


@dataclass
class TrainConfig:
    lr: float = CLASSIFICATION_LR
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-3
    batch_size: int = 20
    frames_per_clip: int = 32
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    eval_batch_size: int = 20
    min_samples_per_epoch: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if not (0 < self.plateau_factor < 1):
            raise ValueError("plateau_factor must lie in (0, 1)")
        if min(self.plateau_patience, self.early_stop_patience, self.batch_size,
               self.frames_per_clip, self.max_epochs, self.eval_batch_size) < 1:
            raise ValueError("patience values, batch sizes, frames_per_clip and max_epochs must be >= 1")


@dataclass
class HistoryRecord:
    epoch: int
    train_loss: float
    val_loss: float
    metric: float
    lr: float


@dataclass
class TrainState:
    lr: float
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0
    epochs_since_improvement: int = 0
    best_val_loss: float = math.inf
    history: list[HistoryRecord] = field(default_factory=list)


# --- losses -----------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross entropy on log-odds, ``max(z,0) - y z + log(1 + exp(-|z|))``."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    z = logits.reshape(-1)
    y = labels.reshape(-1)
    return (torch.clamp(z, min=0) - z * y + torch.log1p(torch.exp(-z.abs()))).mean()


def mse(preds: Tensor, targets: Tensor) -> Tensor:
    targets = torch.as_tensor(targets, dtype=preds.dtype)
    if preds.numel() == 0:
        raise ValueError("mse of empty input")
    if preds.numel() != targets.numel():
        raise ValueError("preds and targets differ in length")
    return ((preds.reshape(-1) - targets.reshape(-1)) ** 2).mean()


def task_loss(head: str, pred_value: Tensor, labels: Tensor) -> Tensor:
    return bce_with_logits(pred_value, labels) if head == "binary_logit" else mse(pred_value, labels)


def task_metric(head: str, values, labels) -> tuple[str, float]:
    if head == "binary_logit":
        try:
            return "roc_auc", roc_auc(values, labels)
        except ValueError:
            return "roc_auc", float("nan")
    return "r2", r_squared(values, labels)


# --- optimizer and schedule ----------------------------------------------------

def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: TrainState,
               cfg: TrainConfig, lr: float | None = None) -> dict[str, Tensor]:
    """One bias-corrected Adam step with decoupled weight decay.

    ``w <- w - lr * wd * w - lr * m_hat / (sqrt(v_hat) + eps)``. Moments in
    ``state`` are updated in place; new parameter tensors are returned.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    with torch.no_grad():
        for name, w in params.items():
            g = grads[name]
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            update = (m / c1) / (torch.sqrt(v / c2) + cfg.eps)
            out[name] = w - lr * cfg.weight_decay * w - lr * update
    return out


def plateau_schedule_update(state: TrainState, val_loss: float,
                            cfg: TrainConfig) -> tuple[float, bool]:
    """Record one epoch's validation loss; returns ``(lr, stop)``.

    A strictly lower loss than the best so far resets the no-improvement
    counter. Otherwise the counter grows; every ``plateau_patience`` consecutive
    misses divide the rate by 1/plateau_factor, and ``early_stop_patience``
    misses request a stop. Rate cuts do not reset the counter.
    """
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
        return state.lr, False
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement % cfg.plateau_patience == 0:
        state.lr *= cfg.plateau_factor
    return state.lr, state.epochs_since_improvement >= cfg.early_stop_patience


# --- data views -------------------------------------------------------------

def eval_view(model, clip: VideoClip) -> VideoClip:
    """All frames for set models; uniformly resampled fixed-length clip for the temporal baseline."""
    if model.time_ordered:
        return with_frames(clip, clip.frames[resample_indices(clip.num_frames, model.cfg.t_fix)])
    return clip


def train_view(model, clip: VideoClip, k: int, rng: np.random.Generator):
    if model.time_ordered:
        return eval_view(model, clip), None
    frames, mask = sample_frames(clip, k, rng)
    return with_frames(clip, frames), mask


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    clip_ids: list[str]
    values: np.ndarray
    labels: np.ndarray
    loss: float
    metric_name: str
    metric: float
    esv: np.ndarray | None = None
    edv: np.ndarray | None = None
    records: list[AttentionRecord] | None = None

    def head_entropy(self) -> np.ndarray | None:
        if not self.records:
            return None
        return np.mean([attention_entropy(r) for r in self.records], axis=0)


def predict(model, clips: Sequence[VideoClip], batch_size: int = 20,
            params: dict[str, Tensor] | None = None, keep_records: bool = False) -> EvalResult:
    """Eval-mode forward pass over full clips (no sampling, no dropout)."""
    if not clips:
        raise ValueError("no clips to evaluate")
    model.eval()
    head = model.cfg.head
    vals, esv, edv, recs = [], [], [], []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            batch = collate([eval_view(model, c) for c in clips[i:i + batch_size]])
            if params is None:
                pred, rec = model(batch.frames, batch.mask)
            else:
                pred, rec = functional_call(model, params, (batch.frames, batch.mask))
            vals.append(pred.value.numpy())
            if pred.esv is not None:
                esv.append(pred.esv.numpy())
                edv.append(pred.edv.numpy())
            if keep_records and rec is not None:
                recs.extend(rec.unbatch())
    values = np.concatenate(vals)
    labels = np.array([float(c.label) for c in clips], dtype=np.float32)
    loss = float(task_loss(head, torch.from_numpy(values), torch.from_numpy(labels)))
    name, metric = task_metric(head, values, labels)
    return EvalResult(
        [c.clip_id for c in clips], values, labels, loss, name, metric,
        np.concatenate(esv) if esv else None, np.concatenate(edv) if edv else None,
        recs if keep_records else None,
    )


# --- fit --------------------------------------------------------------------

@dataclass
class FitResult:
    model: torch.nn.Module
    history: list[HistoryRecord]
    best_val_loss: float
    best_epoch: int
    checkpoint: Path | None
    stopped_early: bool
    diverged: bool


def write_history(history: Sequence[HistoryRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_FIELDS)
        for h in history:
            wr.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.metric), repr(h.lr)])


def _epoch_schedule(n: int, cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Batches of ``(pass, clip indices)``; small sets are cycled to reach ``min_samples_per_epoch``."""
    passes = max(1, -(-cfg.min_samples_per_epoch // n))
    out = []
    for p in range(passes):
        order = rng.permutation(n)
        out.extend((p, order[i:i + cfg.batch_size]) for i in range(0, n, cfg.batch_size))
    return out


def fit(model_cfg: AnyConfig, train_cfg: TrainConfig, train_clips: Sequence[VideoClip],
        val_clips: Sequence[VideoClip], out_dir: str | Path | None = None,
        val_loss_override=None) -> FitResult:
    """Train with per-epoch frame resampling, validate on full clips, keep the best model.

    Deterministic for a given ``train_cfg.seed``. A checkpoint is written to
    ``out_dir/best.ckpt`` whenever the validation loss improves, and the
    history CSV to ``out_dir/history.csv``. ``val_loss_override(epoch)`` lets
    tests script the validation loss sequence.
    """
    if not train_clips or not val_clips:
        raise ValueError("need non-empty train and validation sets")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    seed = train_cfg.seed
    model = build_model(model_cfg, seed=seed)
    head = model.cfg.head
    params = {k: v.detach().clone() for k, v in model.named_parameters()}
    state = TrainState(lr=train_cfg.lr)
    best_params = {k: v.clone() for k, v in params.items()}
    best_epoch, stopped, diverged = -1, False, False
    ckpt = out / "best.ckpt" if out is not None else None
    labels_all = torch.tensor([float(c.label) for c in train_clips], dtype=torch.float32)

    for epoch in range(train_cfg.max_epochs):
        order_rng = np.random.default_rng([seed, epoch])
        total, count = 0.0, 0
        try:
            for b, (pss, idx) in enumerate(_epoch_schedule(len(train_clips), train_cfg, order_rng)):
                views, masks = [], []
                for i in idx:
                    v, m = train_view(model, train_clips[i],
                                      train_cfg.frames_per_clip,
                                      np.random.default_rng([seed, epoch, pss, int(i)]))
                    views.append(v)
                    masks.append(m if m is not None else np.ones(v.num_frames, dtype=bool))
                batch = collate(views, masks)
                labels = labels_all[idx]
                gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch, b]).generate_state(1)[0]))

                def loss_fn(p):
                    pred, _ = functional_call(model, p, (batch.frames, batch.mask, gen))
                    return task_loss(head, pred.value, labels)

                model.train()
                loss, grads = diffcore.value_and_grad(loss_fn, params)
                params = adamw_step(params, grads, state, train_cfg)
                total += float(loss) * len(idx)
                count += len(idx)
        except (diffcore.NonFiniteError, FloatingPointError) as err:
            log.warning("training diverged at epoch %d: %s", epoch, err)
            diverged = True
            break
        train_loss = total / count
        lr_used = state.lr
        if val_loss_override is not None:
            val_loss, metric = float(val_loss_override(epoch)), float("nan")
        else:
            res = predict(model, val_clips, train_cfg.eval_batch_size, params=params)
            val_loss, metric = res.loss, res.metric
        if not math.isfinite(val_loss):
            log.warning("validation loss is not finite at epoch %d", epoch)
            diverged = True
            break
        improved = val_loss < state.best_val_loss
        _, stop = plateau_schedule_update(state, val_loss, train_cfg)
        state.history.append(HistoryRecord(epoch, train_loss, val_loss, metric, lr_used))
        if improved:
            best_params = {k: v.clone() for k, v in params.items()}
            best_epoch = epoch
            if ckpt is not None:
                save_checkpoint(ckpt, model_cfg, best_params,
                                extra={"epoch": epoch, "val_loss": val_loss,
                                       "train": asdict(train_cfg)})
        if out is not None:
            write_history(state.history, out / "history.csv")
        log.info("epoch %d train %.4f val %.4f metric %.4f lr %.2e", epoch, train_loss,
                 val_loss, metric, lr_used)
        if stop:
            stopped = True
            break

    if out is not None:
        write_history(state.history, out / "history.csv")
    model.load_state_dict(best_params)
    model.eval()
    return FitResult(model, state.history, state.best_val_loss, best_epoch,
                     ckpt if ckpt is not None and ckpt.exists() else None, stopped, diverged)
