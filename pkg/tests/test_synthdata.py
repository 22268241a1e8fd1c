import numpy as np
import pytest
from scipy.stats import ks_2samp

from usvid.dataio import read_manifest
from usvid.synthdata import (GenConfig, disk_area, gen_area_ratio_task, gen_keyframe_task,
                             gen_motion_direction_task, generate, split_clips, write_dataset)

SMALL = dict(n_clips=40, image_size=32, t_range=(8, 12))


def test_keyframe_clip_structure_noise_free():
    clips = gen_keyframe_task(GenConfig(noise_std=0.0, **SMALL), seed=0)
    assert len(clips) == 40 and sum(c.label for c in clips) == 20
    for c in clips:
        t = c.num_frames
        assert 8 <= t <= 12 and c.frames.shape[1:] == (3, 32, 32)
        assert c.frames.dtype == np.float32 and 0 <= c.frames.min() and c.frames.max() <= 1
        keys = c.meta["key_frames"]
        if c.label:
            assert 1 <= len(keys) <= 5
            others = np.setdiff1d(np.arange(t), keys)
            assert c.frames[keys].max() > c.frames[others].max() + 0.3
        else:
            assert keys == []
            # without key frames every frame is identical
            assert np.all(c.frames == c.frames[0])


def test_generation_is_deterministic_and_seed_sensitive():
    a = generate("keyframe", GenConfig(**SMALL), 3)
    b = generate("keyframe", GenConfig(**SMALL), 3)
    c = generate("keyframe", GenConfig(**SMALL), 4)
    assert all(np.array_equal(x.frames, y.frames) and x.label == y.label for x, y in zip(a, b))
    assert not all(np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def test_area_ratio_labels_match_rendered_areas():
    clips = gen_area_ratio_task(GenConfig(noise_std=0.0, **SMALL), seed=1)
    for c in clips:
        assert c.label == pytest.approx(1 - c.meta["min_area"] / c.meta["max_area"])
        assert 0.0 < c.label < 1.0
        # order-free: the label only depends on the multiset of areas
        area = (c.frames.max(axis=1) > 0.5).sum(axis=(1, 2))
        assert area.min() == c.meta["min_area"] and area.max() == c.meta["max_area"]


def test_disk_area_close_to_pi_r_squared():
    # pixel centres sit on half-integers, so a disk centred on a corner covers 208 of them
    n = sum((i + 0.5 - 16) ** 2 + (j + 0.5 - 16) ** 2 <= 64 for i in range(32) for j in range(32))
    assert disk_area(8.0, np.array([16.0, 16.0]), 32) == n == 208
    assert n == pytest.approx(np.pi * 64, rel=0.05)


def test_motion_blob_follows_the_stated_direction():
    clips = gen_motion_direction_task(GenConfig(noise_std=0.0, **SMALL), seed=2)
    for c in clips:
        img = c.frames[:, 0] - c.frames[:, 0].min(axis=(1, 2), keepdims=True)
        rows, cols = np.unravel_index(img.reshape(len(img), -1).argmax(1), img.shape[1:])
        cy, cx = c.meta["center"]
        ang = np.unwrap(np.arctan2(cy + 0.5 - rows - 0.5 + 0.5, cols + 0.5 - cx))
        step = np.sign(np.diff(ang)).sum()
        assert (step > 0) == bool(c.label)


def test_motion_frame_sets_are_label_independent():
    # the counterclockwise start of the swept arc is uniform for both classes
    clips = gen_motion_direction_task(GenConfig(n_clips=600, image_size=32, t_range=(8, 12)), seed=0)
    start = {0: [], 1: []}
    for c in clips:
        a = c.meta["phase"] - (0.0 if c.label else c.meta["sweep"])
        start[int(c.label)].append(np.mod(a, 2 * np.pi))
    sweep = {k: [c.meta["sweep"] for c in clips if c.label == k] for k in (0, 1)}
    assert ks_2samp(start[0], start[1]).pvalue > 1e-3
    assert ks_2samp(sweep[0], sweep[1]).pvalue > 1e-3


def test_groups_split_cleanly_and_proportions():
    clips = split_clips(generate("keyframe", GenConfig(n_clips=200, t_range=(5, 6)), 0), 0)
    by_group = {}
    for c in clips:
        by_group.setdefault(c.group_id, set()).add(c.split)
    assert all(len(s) == 1 for s in by_group.values())
    counts = {s: sum(1 for g in by_group.values() if s in g) for s in ("train", "val", "test")}
    assert counts == {"train": 28, "val": 6, "test": 6}


def test_bad_configs_rejected():
    with pytest.raises(ValueError):
        GenConfig(t_range=(1, 4))
    with pytest.raises(ValueError):
        gen_keyframe_task(GenConfig(k_range=(1, 20), t_range=(8, 12), n_clips=4))
    with pytest.raises(ValueError):
        generate("nope", GenConfig(n_clips=2))


def test_write_dataset_roundtrip(tmp_path):
    clips = split_clips(generate("motion", GenConfig(n_clips=10, t_range=(4, 6)), 0), 0)
    write_dataset(clips, tmp_path)
    m = read_manifest(tmp_path / "manifest.csv")
    assert len(m) == 10 and {r.label for r in m.rows} <= {0.0, 1.0}
    loaded = {c.clip_id: c for s in ("train", "val", "test") for c in m.load_split(s)}
    for c in clips:
        assert np.array_equal(loaded[c.clip_id].frames, c.frames)
