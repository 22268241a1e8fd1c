import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import make_clip
from usvid.dataio import (BadMagicError, ClipFormatError, Manifest, ManifestError, ManifestRow,
                          TruncatedClipError, VersionMismatchError, choose_groups, collate, read_clip,
                          read_manifest, sample_frames, subsample_train_groups, write_clip, write_manifest)


def test_clip_file_layout_is_little_endian(tmp_path):
    clip = make_clip(t=2, c=1, size=4)
    write_clip(clip, tmp_path / "a.usvc")
    raw = (tmp_path / "a.usvc").read_bytes()
    assert raw[:4] == b"USVC"
    assert struct.unpack("<HIIII", raw[4:22]) == (1, 2, 1, 4, 4)
    assert len(raw) == 22 + 4 * 32
    np.testing.assert_array_equal(np.frombuffer(raw[22:], "<f4").reshape(2, 1, 4, 4), clip.frames)


def test_clip_roundtrip_bit_exact(tmp_path):
    clip = make_clip(t=5)
    write_clip(clip, tmp_path / "c.usvc")
    assert np.array_equal(read_clip(tmp_path / "c.usvc").frames, clip.frames)


def test_corrupt_clip_files(tmp_path):
    clip = make_clip(t=3, c=1, size=4)
    p = tmp_path / "c.usvc"
    write_clip(clip, p)
    good = p.read_bytes()
    cases = {
        "magic": (b"ABCD" + good[4:], BadMagicError),
        "version": (good[:4] + struct.pack("<H", 2) + good[6:], VersionMismatchError),
        "short": (good[:-1], TruncatedClipError),
        "header": (good[:10], TruncatedClipError),
        "trailing": (good + b"\0\0\0\0", ClipFormatError),
    }
    for name, (blob, err) in cases.items():
        q = tmp_path / f"{name}.usvc"
        q.write_bytes(blob)
        with pytest.raises(err):
            read_clip(q)


def _write_set(tmp_path, layout):
    rows = []
    for cid, group, split, t in layout:
        write_clip(make_clip(t=t, c=1, size=4), tmp_path / f"{cid}.usvc")
        rows.append(ManifestRow(cid, f"{cid}.usvc", "keyframe", 1.0, group, split, t))
    write_manifest(rows, tmp_path / "manifest.csv")
    return tmp_path / "manifest.csv"


def test_manifest_roundtrip_and_validation(tmp_path):
    path = _write_set(tmp_path, [("a", "g1", "train", 3), ("b", "g1", "train", 2), ("c", "g2", "val", 4)])
    m = read_manifest(path)
    assert [r.clip_id for r in m.split("train")] == ["a", "b"]
    assert m.load_split("val")[0].num_frames == 4
    assert path.read_text().splitlines()[0] == "clip_id,path,task,label,group_id,split,num_frames"


@pytest.mark.parametrize("layout", [
    [("a", "g1", "train", 3), ("a", "g2", "val", 3)],         # duplicate id
    [("a", "g1", "train", 3), ("b", "g1", "test", 3)],        # group leak
    [("a", "g1", "holdout", 3)],                              # bad split
])
def test_manifest_errors(tmp_path, layout):
    path = _write_set(tmp_path, layout)
    with pytest.raises(ManifestError):
        read_manifest(path)


def test_manifest_frame_count_mismatch(tmp_path):
    path = _write_set(tmp_path, [("a", "g1", "train", 3)])
    text = path.read_text().replace(",train,3", ",train,4")
    path.write_text(text)
    with pytest.raises(ManifestError):
        read_manifest(path)


def test_subsample_keeps_whole_groups_and_passes_eval_through():
    rows = [ManifestRow(f"c{i}", "x", "keyframe", 0.0, f"g{i // 3}", "train", 4) for i in range(30)]
    rows += [ManifestRow("v", "x", "keyframe", 0.0, "gv", "val", 4)]
    sub = subsample_train_groups(Manifest(rows), count=4, seed=0)
    kept = sub.groups("train")
    assert len(kept) == 4 and len(sub.split("train")) == 12 and len(sub.split("val")) == 1
    with pytest.raises(ValueError):
        subsample_train_groups(Manifest(rows), count=11, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_group_subsets_are_nested(n, seed):
    groups = [f"g{i}" for i in range(n)]
    prev = set()
    for k in range(1, n + 1):
        cur = choose_groups(groups, k, seed)
        assert len(cur) == k and prev <= cur
        prev = cur


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_sample_frames_sorted_distinct_or_padded(t, k, seed):
    clip = make_clip(t=t, c=1, size=2)
    frames, mask = sample_frames(clip, k, np.random.default_rng(seed))
    assert frames.shape[0] == k and mask.sum() == min(t, k)
    if t >= k:
        idx = [int(np.flatnonzero((clip.frames == f).all(axis=(1, 2, 3)))[0]) for f in frames]
        assert idx == sorted(set(idx))
    else:
        assert np.array_equal(frames[:t], clip.frames) and not frames[t:].any()


def test_collate_pads_and_masks():
    a, b = make_clip(t=2, c=1, size=4, clip_id="a", label=1), make_clip(t=4, c=1, size=4, clip_id="b")
    batch = collate([a, b])
    assert batch.frames.shape == (2, 4, 1, 4, 4)
    assert batch.mask.tolist() == [[True, True, False, False], [True] * 4]
    assert torch.equal(batch.frames[0, 2:], torch.zeros(2, 1, 4, 4))
    assert batch.labels.tolist() == [1.0, 0.0] and batch.clip_ids == ["a", "b"]


def test_collate_errors():
    with pytest.raises(ValueError):
        collate([])
    with pytest.raises(ValueError):
        collate([make_clip(size=4), make_clip(size=8)])
    with pytest.raises(ValueError):
        collate([make_clip(t=3)], masks=[np.array([True, False, True])])
