import math

import numpy as np
import pytest
import torch

from conftest import make_clip
from usvid.encoder import EncoderConfig
from usvid.model import ModelConfig, TemporalBaselineConfig
from usvid.train import (TrainConfig, TrainState, _epoch_schedule, adamw_step, bce_with_logits, eval_view,
                         fit, mse, plateau_schedule_update, predict, train_view)
from usvid.model import build_model

ENC = EncoderConfig(in_channels=1, image_size=8, embed_dim=8, widths=(4, 4))


def _clips(n, t=5, split="train"):
    return [make_clip(t=t + i % 3, c=1, size=8, label=i % 2, clip_id=f"{split}{i}", group_id=f"g{i}",
                      split=split, seed=i) for i in range(n)]


def test_bce_matches_naive_and_is_stable():
    z = torch.tensor([-3.0, 0.0, 2.0])
    y = torch.tensor([0.0, 1.0, 1.0])
    naive = -(y * torch.log(torch.sigmoid(z)) + (1 - y) * torch.log(1 - torch.sigmoid(z))).mean()
    assert float(bce_with_logits(z, y)) == pytest.approx(float(naive), rel=1e-6)
    big = bce_with_logits(torch.tensor([1000.0, -1000.0]), torch.tensor([0.0, 1.0]))
    assert float(big) == pytest.approx(1000.0)
    with pytest.raises(ValueError):
        bce_with_logits(z, torch.tensor([0.0, 0.5, 1.0]))


def test_mse_value():
    assert float(mse(torch.tensor([1.0, 3.0]), torch.tensor([0.0, 1.0]))) == 2.5


def test_adamw_first_two_steps_by_hand():
    cfg = TrainConfig(lr=0.1, weight_decay=0.01, eps=1e-12)
    state = TrainState(lr=0.1)
    w = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    g = {"w": torch.tensor([0.5, -4.0], dtype=torch.float64)}
    w1 = adamw_step(w, g, state, cfg)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(w1["w"].numpy(), [1 - 0.001 - 0.1, -2 + 0.002 + 0.1], rtol=1e-10)
    w2 = adamw_step(w1, g, state, cfg)
    # a constant gradient keeps m_hat = g and v_hat = g^2
    expect = w1["w"].numpy() * (1 - 0.001) - 0.1 * np.sign([0.5, -4.0])
    np.testing.assert_allclose(w2["w"].numpy(), expect, rtol=1e-10)


def test_adamw_nan_gradient_names_parameter():
    with pytest.raises(FloatingPointError, match="enc.w"):
        adamw_step({"enc.w": torch.ones(1)}, {"enc.w": torch.tensor([math.nan])}, TrainState(lr=1.0),
                   TrainConfig())


def test_schedule_cuts_and_stops():
    cfg = TrainConfig(lr=1.0)
    st = TrainState(lr=1.0)
    seq = [5.0] + [6.0] * 10
    out = [plateau_schedule_update(st, v, cfg) for v in seq]
    lrs = [lr for lr, _ in out]
    assert lrs[:3] == [1.0, 1.0, 1.0] and lrs[3] == pytest.approx(0.1)
    assert lrs[6] == pytest.approx(0.01) and lrs[9] == pytest.approx(0.001)
    assert [s for _, s in out].index(True) == 10


def test_epoch_schedule_cycles_small_sets():
    cfg = TrainConfig(batch_size=4, min_samples_per_epoch=10)
    sched = _epoch_schedule(3, cfg, np.random.default_rng(0))
    assert [p for p, _ in sched] == [0, 1, 2, 3]
    assert all(sorted(ix.tolist()) == [0, 1, 2] for _, ix in sched)


def test_views_per_model_kind():
    usvn = build_model(ModelConfig(encoder=ENC, n_heads=2))
    temporal = build_model(TemporalBaselineConfig(in_channels=1, image_size=8, widths=(4, 4),
                                                  temporal_strides=(1, 1), t_fix=4))
    clip = make_clip(t=9, c=1, size=8)
    v, m = train_view(usvn, clip, 4, np.random.default_rng(0))
    assert v.num_frames == 4 and m.all()
    assert eval_view(usvn, clip) is clip
    v, m = train_view(temporal, clip, 32, np.random.default_rng(0))
    assert m is None and np.array_equal(v.frames, clip.frames[[0, 3, 5, 8]])


def test_fit_scripted_validation_stops_and_restores_best(tmp_path):
    losses = [1.0, 0.5, 0.6, 0.4] + [0.9] * 20
    cfg = TrainConfig(lr=1e-3, batch_size=4, frames_per_clip=3, max_epochs=30)
    res = fit(ModelConfig(encoder=ENC, n_heads=2), cfg, _clips(6), _clips(4, split="val"),
              tmp_path, val_loss_override=lambda e: losses[e])
    assert res.best_epoch == 3 and res.stopped_early and len(res.history) == 14
    assert [h.lr for h in res.history][4:8] == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4])
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "history.csv").exists()


def test_fit_is_deterministic(tmp_path):
    cfg = TrainConfig(lr=1e-2, batch_size=3, frames_per_clip=3, max_epochs=2, seed=7)
    mcfg = ModelConfig(encoder=ENC, n_heads=2)
    a = fit(mcfg, cfg, _clips(6), _clips(4, split="val"), tmp_path / "a")
    b = fit(mcfg, cfg, _clips(6), _clips(4, split="val"), tmp_path / "b")
    assert (tmp_path / "a/best.ckpt").read_bytes() == (tmp_path / "b/best.ckpt").read_bytes()
    assert (tmp_path / "a/history.csv").read_text() == (tmp_path / "b/history.csv").read_text()
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]


def test_fit_reports_divergence():
    cfg = TrainConfig(lr=1e-2, batch_size=3, frames_per_clip=3, max_epochs=3)
    clips = _clips(6)
    for c in clips:
        c.frames[:, 0, 0, 0] = np.nan
    res = fit(ModelConfig(encoder=ENC, n_heads=2), cfg, clips, _clips(2, split="val"))
    assert res.diverged and res.history == [] and res.checkpoint is None


def test_predict_uses_full_clips_and_entropy():
    m = build_model(ModelConfig(encoder=ENC, n_heads=2))
    res = predict(m, _clips(5, split="val"), batch_size=2, keep_records=True)
    assert [r.weights.shape[1] for r in res.records] == [5, 6, 7, 5, 6]
    assert res.metric_name == "roc_auc" and res.head_entropy().shape == (2,)
