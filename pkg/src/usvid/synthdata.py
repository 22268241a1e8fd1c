"""Deterministic synthetic video tasks.

* ``keyframe``   - detect a bright blob present in a few frames (order-free detection)
* ``area_ratio`` - regress 1 - min(area)/max(area) of a pulsating disk (order-free regression)
* ``motion``     - classify the rotation direction of an orbiting blob (needs temporal order)

Every clip draws from its own child stream of ``SeedSequence(seed)``, so
generating clip i never depends on how many clips precede it, and groups of
clips ("patients") share a background texture and a location prior.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import (Manifest, ManifestRow, VideoClip, assign_group_splits,
                     write_clip, write_manifest)


@dataclass
class GenConfig:
    n_clips: int = 500
    channels: int = 3
    image_size: int = 32
    t_range: tuple[int, int] = (16, 64)
    noise_std: float = 0.1
    n_groups: int | None = None
    # keyframe task
    blob_radius: float = 4.5
    bright_intensity: float = 0.9
    distractor_intensity: float = 0.3
    k_range: tuple[int, int] = (1, 5)
    # area-ratio task
    disk_radius: float = 8.0
    disk_intensity: float = 0.6
    amp_range: tuple[float, float] = (0.1, 0.4)
    freq_range: tuple[float, float] = (1.0, 3.0)
    # motion task
    orbit_radius: float = 9.0
    orbit_blob_radius: float = 4.0
    revolutions_range: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        self.t_range = tuple(int(t) for t in self.t_range)
        self.k_range = tuple(int(k) for k in self.k_range)
        self.amp_range = tuple(float(a) for a in self.amp_range)
        self.freq_range = tuple(float(f) for f in self.freq_range)
        self.revolutions_range = tuple(float(r) for r in self.revolutions_range)
        if self.n_clips < 1 or self.channels < 1 or self.image_size < 4:
            raise ValueError("n_clips, channels must be positive and image_size >= 4")
        lo, hi = self.t_range
        if lo < 2 or hi < lo:
            raise ValueError(f"invalid t_range {self.t_range}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.groups < 1 or self.groups > self.n_clips:
            raise ValueError(f"n_groups must lie in [1, n_clips], got {self.groups}")

    @property
    def groups(self) -> int:
        return self.n_groups if self.n_groups is not None else max(1, self.n_clips // 5)


@dataclass
class _Group:
    background: np.ndarray     # C x H x W
    center: np.ndarray         # (row, col) location prior


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _make_group(cfg: GenConfig, rng: np.random.Generator) -> _Group:
    s = cfg.image_size
    rr, cc = _grid(s)
    base = rng.uniform(0.1, 0.25, size=(cfg.channels, 1, 1))
    pattern = np.zeros((s, s))
    for _ in range(3):
        kr, kc = rng.uniform(-2, 2, size=2) * 2 * np.pi / s
        pattern += np.cos(kr * rr + kc * cc + rng.uniform(0, 2 * np.pi))
    background = base + 0.1 * pattern[None] / 3.0
    margin = cfg.blob_radius + 2
    center = rng.uniform(margin, s - margin, size=2)
    return _Group(background, center)


def _bump(centers: np.ndarray, radius: float, size: int) -> np.ndarray:
    """Gaussian bumps with sigma = radius/2 at ``centers`` (T x 2, row/col) -> T x H x W."""
    rr, cc = _grid(size)
    sigma = radius / 2.0
    d2 = (rr[None] - centers[:, 0, None, None]) ** 2 + (cc[None] - centers[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * sigma * sigma))


def _finish(frames: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.noise_std > 0:
        frames = frames + rng.normal(0.0, cfg.noise_std, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _streams(cfg: GenConfig, seed: int):
    root = np.random.SeedSequence(seed)
    clip_ss, group_ss, assign_ss = root.spawn(3)
    assign = np.random.default_rng(assign_ss)
    group_of = assign.permutation(cfg.n_clips) % cfg.groups
    groups = [_make_group(cfg, np.random.default_rng(ss)) for ss in group_ss.spawn(cfg.groups)]
    labels = assign.permutation(np.arange(cfg.n_clips) % 2)
    return clip_ss.spawn(cfg.n_clips), groups, group_of, labels


def _clip_rng(ss: np.random.SeedSequence) -> np.random.Generator:
    return np.random.default_rng(ss)


def gen_keyframe_task(cfg: GenConfig, seed: int = 0) -> list[VideoClip]:
    """Binary detection: positives show a bright blob in k random frames at a fixed spot.

    All clips carry a static dim distractor blob, so brightness (not mere
    presence of a blob) decides the label. The label is a property of the
    frame set and does not depend on frame order.
    """
    k_lo, k_hi = cfg.k_range
    if k_lo < 1 or k_hi < k_lo or k_hi > cfg.t_range[0]:
        raise ValueError(f"invalid k_range {cfg.k_range} for t_range {cfg.t_range}")
    if cfg.blob_radius <= 0 or 2 * (cfg.blob_radius + 2) >= cfg.image_size:
        raise ValueError("blob_radius incompatible with image_size")
    streams, groups, group_of, labels = _streams(cfg, seed)
    s = cfg.image_size
    out = []
    for i, ss in enumerate(streams):
        rng = _clip_rng(ss)
        grp = groups[group_of[i]]
        t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        margin = cfg.blob_radius + 1
        blob_at = np.clip(grp.center + rng.normal(0, 2.0, size=2), margin, s - margin)
        distractor_at = rng.uniform(margin, s - margin, size=2)
        k = int(rng.integers(k_lo, k_hi + 1))
        keys = np.sort(rng.choice(t, size=k, replace=False))
        label = int(labels[i])
        frames = np.repeat(grp.background[None], t, axis=0)
        frames = frames + cfg.distractor_intensity * _bump(
            np.repeat(distractor_at[None], t, 0), cfg.blob_radius, s)[:, None]
        if label:
            bright = _bump(blob_at[None], cfg.blob_radius, s)[0]
            frames[keys] += cfg.bright_intensity * bright[None, None]
        frames = _finish(frames, cfg, rng)
        meta = {
            "k": k if label else 0,
            "key_frames": keys.tolist() if label else [],
            "blob_center": blob_at.tolist(),
            "distractor_center": distractor_at.tolist(),
        }
        out.append(VideoClip(frames, float(label), f"keyframe_{i:05d}", f"g{group_of[i]:04d}",
                             task="keyframe", meta=meta))
    return out


def disk_area(radius: float, center: np.ndarray, size: int) -> int:
    rr, cc = _grid(size)
    return int(((rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius).sum())


def gen_area_ratio_task(cfg: GenConfig, seed: int = 0) -> list[VideoClip]:
    """Regression: a filled disk pulsates with r(t) = r0 (1 + A sin(2 pi f t / T + phi)).

    The label ``1 - min_t area / max_t area`` is computed from the pixel areas
    actually rendered, so it is exact for the clip and invariant to frame order.
    """
    a_lo, a_hi = cfg.amp_range
    if not 0.0 <= a_lo <= a_hi < 1.0:
        raise ValueError(f"invalid amp_range {cfg.amp_range}")
    if cfg.disk_radius * (1 - a_hi) < 1.0:
        raise ValueError("disk radius r0*(1-A) falls below one pixel")
    if cfg.disk_radius * (1 + a_hi) + 2 > cfg.image_size / 2:
        raise ValueError("disk does not fit in the image at maximum amplitude")
    f_lo, f_hi = cfg.freq_range
    if f_lo <= 0 or f_hi < f_lo:
        raise ValueError(f"invalid freq_range {cfg.freq_range}")
    streams, groups, group_of, _ = _streams(cfg, seed)
    s = cfg.image_size
    rr, cc = _grid(s)
    out = []
    for i, ss in enumerate(streams):
        rng = _clip_rng(ss)
        grp = groups[group_of[i]]
        t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        amp = float(rng.uniform(a_lo, a_hi))
        freq = float(rng.uniform(f_lo, f_hi))
        phase = float(rng.uniform(0, 2 * np.pi))
        offset = np.clip(rng.normal(0, 1.0, size=2), -2, 2)
        center = np.array([s / 2, s / 2]) + offset
        radii = cfg.disk_radius * (1 + amp * np.sin(2 * np.pi * freq * np.arange(t) / t + phase))
        inside = ((rr[None] - center[0]) ** 2 + (cc[None] - center[1]) ** 2) <= radii[:, None, None] ** 2
        areas = inside.sum(axis=(1, 2))
        label = 1.0 - float(areas.min()) / float(areas.max())
        frames = np.repeat(grp.background[None], t, axis=0) + cfg.disk_intensity * inside[:, None]
        frames = _finish(frames, cfg, rng)
        meta = {
            "amplitude": amp, "frequency": freq, "phase": phase, "center": center.tolist(),
            "min_area": int(areas.min()), "max_area": int(areas.max()),
        }
        out.append(VideoClip(frames, label, f"area_ratio_{i:05d}", f"g{group_of[i]:04d}",
                             task="area_ratio", meta=meta))
    return out


def gen_motion_direction_task(cfg: GenConfig, seed: int = 0) -> list[VideoClip]:
    """Binary: a blob orbits the centre counterclockwise (1) or clockwise (0).

    Start phase is uniform and all other draws ignore the label, so the
    unordered set of frames has the same distribution in both classes.
    """
    r_lo, r_hi = cfg.revolutions_range
    if r_lo <= 0 or r_hi < r_lo:
        raise ValueError(f"invalid revolutions_range {cfg.revolutions_range}")
    if cfg.orbit_radius <= 0 or cfg.orbit_radius + cfg.orbit_blob_radius + 2 > cfg.image_size / 2:
        raise ValueError("orbit does not fit in the image")
    streams, groups, group_of, labels = _streams(cfg, seed)
    s = cfg.image_size
    out = []
    for i, ss in enumerate(streams):
        rng = _clip_rng(ss)
        grp = groups[group_of[i]]
        t = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        sweep = 2 * np.pi * float(rng.uniform(r_lo, r_hi))
        phase = float(rng.uniform(0, 2 * np.pi))
        offset = np.clip(rng.normal(0, 1.0, size=2), -2, 2)
        label = int(labels[i])
        direction = 1.0 if label else -1.0
        angles = phase + direction * sweep * np.arange(t) / (t - 1)
        center = np.array([s / 2, s / 2]) + offset
        # row axis points down: counterclockwise on screen means row decreases with sin
        pos = np.stack([center[0] - cfg.orbit_radius * np.sin(angles),
                        center[1] + cfg.orbit_radius * np.cos(angles)], axis=1)
        frames = np.repeat(grp.background[None], t, axis=0)
        frames = frames + cfg.bright_intensity * _bump(pos, cfg.orbit_blob_radius, s)[:, None]
        frames = _finish(frames, cfg, rng)
        meta = {"angles": np.mod(angles, 2 * np.pi).tolist(), "sweep": sweep, "phase": phase,
                "center": center.tolist()}
        out.append(VideoClip(frames, float(label), f"motion_{i:05d}", f"g{group_of[i]:04d}",
                             task="motion", meta=meta))
    return out


TASKS: dict[str, Callable[[GenConfig, int], list[VideoClip]]] = {
    "keyframe": gen_keyframe_task,
    "area_ratio": gen_area_ratio_task,
    "motion": gen_motion_direction_task,
}
BINARY_TASKS = ("keyframe", "motion")


def generate(task: str, cfg: GenConfig, seed: int = 0) -> list[VideoClip]:
    try:
        fn = TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
    return fn(cfg, seed)


def split_clips(clips: list[VideoClip], seed: int,
                fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> list[VideoClip]:
    """Assign every clip the split of its group (group-level 70/15/15 by default)."""
    splits = assign_group_splits([c.group_id for c in clips], seed, fractions)
    for c in clips:
        c.split = splits[c.group_id]
    return clips


def write_dataset(clips: list[VideoClip], out_dir: str | Path) -> Manifest:
    """Write one ClipFile per clip under ``clips/`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in clips:
        rel = f"clips/{c.clip_id}.usvc"
        write_clip(c, out_dir / rel)
        rows.append(ManifestRow(c.clip_id, rel, c.task, float(c.label), c.group_id, c.split,
                                c.num_frames))
    manifest = Manifest(rows, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
