import pytest
import torch

from usvid.encoder import EncoderConfig, FrameEncoder, encode_frames

CFG = EncoderConfig(in_channels=1, image_size=8, embed_dim=12, widths=(4, 6))


def test_output_shape_and_padding_rows_zero():
    torch.manual_seed(0)
    enc = FrameEncoder(CFG)
    frames = torch.rand(2, 5, 1, 8, 8)
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    e = encode_frames(enc, frames, mask)
    assert e.values.shape == (2, 5, 12)
    assert torch.equal(e.values[0, 3:], torch.zeros(2, 12))


def test_frames_are_encoded_independently():
    torch.manual_seed(0)
    enc = FrameEncoder(CFG)
    frames = torch.rand(1, 4, 1, 8, 8)
    full = enc(frames).values
    alone = enc(frames[:, 2:3]).values
    assert torch.allclose(full[:, 2], alone[:, 0], atol=1e-6)


def test_padded_frame_content_is_ignored():
    torch.manual_seed(0)
    enc = FrameEncoder(CFG)
    frames = torch.rand(1, 3, 1, 8, 8)
    mask = torch.tensor([[True, True, False]])
    other = frames.clone()
    other[0, 2] = 123.0
    assert torch.equal(enc(frames, mask).values, enc(other, mask).values)


def test_rejects_bad_geometry_and_empty():
    enc = FrameEncoder(CFG)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 2, 3, 8, 8))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 2, 1, 8)[..., None])
    with pytest.raises(ValueError):
        enc(torch.rand(0, 2, 1, 8, 8))


def test_config_requires_divisible_image():
    with pytest.raises(ValueError):
        EncoderConfig(image_size=30, widths=(4, 4))


def test_default_widths_give_d256():
    assert EncoderConfig().embed_dim == 256
