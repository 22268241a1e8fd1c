import numpy as np
import pytest
import torch
import torch.nn.functional as F

from usvid.encoder import EncoderConfig
from usvid.model import (CheckpointError, ModelConfig, TemporalBaselineConfig, build_model,
                         config_from_dict, config_to_dict, ef_from_volumes, load_checkpoint, load_model,
                         resample_indices, save_checkpoint, temporal_baseline_forward, usvn_forward,
                         volume_head_map)

ENC = EncoderConfig(in_channels=1, image_size=8, embed_dim=16, widths=(4, 8))


def _usvn(**kw):
    return build_model(ModelConfig(encoder=ENC, n_heads=4, **kw), seed=0)


def test_volume_map_floor_and_ef():
    y = torch.tensor([-50.0, 0.0, 3.0])
    esv, edv = volume_head_map(y, y + 1)
    assert torch.all(esv >= 0.1)
    assert float(esv[0]) == pytest.approx(0.1)
    assert float(esv[1]) == pytest.approx(np.log(2.0) + 0.1)
    ef = ef_from_volumes(esv, edv)
    assert torch.equal(ef, 1 - esv / edv)


def test_ef_rejects_nonpositive_volumes():
    with pytest.raises(ValueError):
        ef_from_volumes(torch.tensor([1.0]), torch.tensor([0.0]))


def test_usvn_ef_head_consistent():
    m = _usvn(head="ef_volumes")
    pred, rec = usvn_forward(m, torch.rand(3, 5, 1, 8, 8))
    assert pred.kind == "ef_volumes"
    assert torch.equal(pred.ef, 1 - pred.esv / pred.edv)
    assert torch.equal(pred.value, pred.ef)
    assert rec.weights.shape == (3, 4, 5)


def test_fixed_pooling_models_have_no_record():
    for pooling in ("average", "max"):
        pred, rec = usvn_forward(build_model(ModelConfig(encoder=ENC, n_heads=1, pooling=pooling)),
                                 torch.rand(2, 3, 1, 8, 8))
        assert rec is None and pred.value.shape == (2,)


def test_invalid_head_count_rejected():
    with pytest.raises(ValueError):
        ModelConfig(encoder=ENC, n_heads=3)


def test_train_mode_dropout_uses_generator():
    m = _usvn()
    x = torch.rand(2, 4, 1, 8, 8)
    a, _ = usvn_forward(m, x, mode="train", generator=torch.Generator().manual_seed(1))
    b, _ = usvn_forward(m, x, mode="train", generator=torch.Generator().manual_seed(1))
    assert torch.equal(a.raw, b.raw)
    with pytest.raises(ValueError):
        usvn_forward(m, x, mode="test")


def test_build_model_deterministic_and_isolated():
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    a = _usvn()
    after = torch.rand(1)
    b = _usvn()
    assert torch.equal(before, after)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k


def test_resample_indices_endpoints_and_rounding():
    assert resample_indices(64, 32).tolist()[:4] == [0, 2, 4, 6]
    idx = resample_indices(10, 4)
    assert idx.tolist() == [0, 3, 6, 9]
    assert resample_indices(3, 5).tolist() == [0, 1, 1, 2, 2]
    assert resample_indices(7, 1).tolist() == [0]


def test_temporal_baseline_shapes_and_errors():
    cfg = TemporalBaselineConfig(in_channels=1, image_size=8, widths=(4, 4), temporal_strides=(1, 2), t_fix=6)
    m = build_model(cfg)
    p = temporal_baseline_forward(m, torch.rand(2, 6, 1, 8, 8))
    assert p.value.shape == (2,)
    with pytest.raises(ValueError):
        temporal_baseline_forward(m, torch.rand(2, 5, 1, 8, 8))
    with pytest.raises(ValueError):
        temporal_baseline_forward(m, torch.rand(1, 6, 1, 8, 8), torch.tensor([[True] * 5 + [False]]))


def test_temporal_baseline_is_order_sensitive():
    cfg = TemporalBaselineConfig(in_channels=1, image_size=8, widths=(4, 4), temporal_strides=(1, 1), t_fix=6)
    m = build_model(cfg, seed=3)
    x = torch.rand(1, 6, 1, 8, 8)
    a = temporal_baseline_forward(m, x).raw
    b = temporal_baseline_forward(m, x.flip(1)).raw
    assert not torch.allclose(a, b)


def test_factorized_block_matches_full_3d_reference():
    # spatial conv2d then temporal conv1d equals two separable conv3d calls
    cfg = TemporalBaselineConfig(in_channels=2, image_size=8, widths=(3,), temporal_strides=(2,), t_fix=5)
    m = build_model(cfg, seed=1)
    blk = m.blocks[0]
    x = torch.rand(1, 5, 2, 8, 8)
    got = blk(x)                                     # B T C H W
    v = x.permute(0, 2, 1, 3, 4)                     # B C T H W
    s = F.relu(F.conv3d(v, blk.spatial.weight[:, :, None], blk.spatial.bias, stride=(1, 2, 2),
                        padding=(0, 1, 1)))
    t = F.relu(F.conv3d(s, blk.temporal.weight[..., None, None], blk.temporal.bias, stride=(2, 1, 1),
                        padding=(1, 0, 0)))
    assert torch.allclose(got, t.permute(0, 2, 1, 3, 4), atol=1e-6)


def test_config_roundtrip():
    for cfg in (ModelConfig(encoder=ENC, n_heads=2), TemporalBaselineConfig(t_fix=8)):
        assert config_from_dict(config_to_dict(cfg)) == cfg


def test_checkpoint_roundtrip_exact(tmp_path):
    m = _usvn(head="ef_volumes")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.cfg, m.state_dict(), {"epoch": 3})
    cfg, params, extra = load_checkpoint(path)
    assert extra == {"epoch": 3} and cfg["kind"] == "usvn"
    for k, v in m.state_dict().items():
        assert torch.equal(params[k], v)
    m2, _ = load_model(path)
    x = torch.rand(2, 3, 1, 8, 8)
    assert torch.equal(usvn_forward(m, x)[0].raw, usvn_forward(m2, x)[0].raw)
    save_checkpoint(tmp_path / "again.ckpt", m.cfg, m.state_dict(), {"epoch": 3})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    m = _usvn()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.cfg, m.state_dict())
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "short.ckpt").write_bytes(data[:-3])
    for name in ("bad.ckpt", "short.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
