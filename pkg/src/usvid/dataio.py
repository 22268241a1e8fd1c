"""Clip container files, CSV manifests, frame sampling and padded batching."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

CLIP_MAGIC = b"USVC"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")
MANIFEST_FIELDS = ("clip_id", "path", "task", "label", "group_id", "split", "num_frames")
SPLITS = ("train", "val", "test")


class ClipFormatError(ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class VersionMismatchError(ClipFormatError):
    pass


class TruncatedClipError(ClipFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray                   # T x C x H x W float32 in [0, 1]
    label: float = 0.0
    clip_id: str = ""
    group_id: str = ""
    split: str = ""
    task: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def write_clip(clip: VideoClip | np.ndarray, path: str | Path) -> None:
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError(f"clip frames must be T x C x H x W, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, *arr.shape))
        fh.write(arr.tobytes())


def read_clip_header(path: str | Path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head)


def _parse_header(head: bytes) -> tuple[int, int, int, int]:
    if len(head) < 4 or head[:4] != CLIP_MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {CLIP_MAGIC!r}")
    if len(head) < _HEADER.size:
        raise TruncatedClipError("truncated header")
    _, version, t, c, h, w = _HEADER.unpack(head[:_HEADER.size])
    if version != CLIP_VERSION:
        raise VersionMismatchError(f"clip file version {version}, reader supports {CLIP_VERSION}")
    return t, c, h, w


def read_clip(path: str | Path, **fields) -> VideoClip:
    buf = Path(path).read_bytes()
    t, c, h, w = _parse_header(buf[:_HEADER.size])
    count = t * c * h * w
    payload = buf[_HEADER.size:]
    if len(payload) < 4 * count:
        raise TruncatedClipError(f"payload has {len(payload)} bytes, header implies {4 * count}")
    if len(payload) > 4 * count:
        raise ClipFormatError("trailing bytes after payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).astype(np.float32)
    return VideoClip(frames=frames, **fields)


# --- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    clip_id: str
    path: str
    task: str
    label: float
    group_id: str
    split: str
    num_frames: int


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def groups(self, split: str | None = None) -> list[str]:
        rows = self.rows if split is None else self.split(split)
        return sorted({r.group_id for r in rows})

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path

    def load(self, row: ManifestRow) -> VideoClip:
        return read_clip(self.resolve(row), label=row.label, clip_id=row.clip_id,
                         group_id=row.group_id, split=row.split, task=row.task)

    def load_split(self, split: str) -> list[VideoClip]:
        return [self.load(r) for r in self.split(split)]


def _fmt_label(x: float) -> str:
    return repr(float(x))


def write_manifest(manifest: Manifest | Sequence[ManifestRow], path: str | Path) -> None:
    rows = manifest.rows if isinstance(manifest, Manifest) else manifest
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        for r in rows:
            wr.writerow([r.clip_id, r.path, r.task, _fmt_label(r.label), r.group_id, r.split, r.num_frames])


def read_manifest(path: str | Path, validate: bool = True) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != MANIFEST_FIELDS:
            raise ManifestError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = [
            ManifestRow(r["clip_id"], r["path"], r["task"], float(r["label"]), r["group_id"],
                        r["split"], int(r["num_frames"]))
            for r in rd
        ]
    m = Manifest(rows, path.parent)
    if validate:
        validate_manifest(m)
    return m


def validate_manifest(manifest: Manifest, check_files: bool = True) -> None:
    seen: set[str] = set()
    group_split: dict[str, str] = {}
    for r in manifest.rows:
        if r.clip_id in seen:
            raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
        seen.add(r.clip_id)
        if r.split not in SPLITS:
            raise ManifestError(f"clip {r.clip_id!r}: unknown split {r.split!r}")
        prev = group_split.setdefault(r.group_id, r.split)
        if prev != r.split:
            raise ManifestError(f"group {r.group_id!r} spans splits {prev!r} and {r.split!r}")
        if check_files:
            t = read_clip_header(manifest.resolve(r))[0]
            if t != r.num_frames:
                raise ManifestError(f"clip {r.clip_id!r}: num_frames {r.num_frames} but file has {t}")


def assign_group_splits(group_ids: Sequence[str], seed: int,
                        fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> dict[str, str]:
    """Randomly assign whole groups to train/val/test in the given proportions."""
    groups = sorted(set(group_ids))
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = int(round(fractions[0] * len(groups)))
    n_val = int(round(fractions[1] * len(groups)))
    out = {}
    for rank, gi in enumerate(order):
        out[groups[gi]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def choose_groups(groups: Sequence[str], count: int, seed: int) -> set[str]:
    """Prefix of one seeded permutation of the sorted groups (nested in ``count``)."""
    groups = sorted(set(groups))
    if count < 1 or count > len(groups):
        raise ValueError(f"requested {count} groups but only {len(groups)} train groups exist")
    order = np.random.default_rng(seed).permutation(len(groups))
    return {groups[i] for i in order[:count]}


def _group_count(n_groups: int, fraction: float | None, count: int | None) -> int:
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        return max(1, int(round(fraction * n_groups)))
    return count


def subsample_train_groups(manifest: Manifest, fraction: float | None = None,
                           count: int | None = None, seed: int = 0) -> Manifest:
    """Keep a random subset of whole train groups; val/test rows pass through untouched.

    Groups are taken as a prefix of one seeded permutation, so the selection at
    count k is contained in the selection at count k+1.
    """
    groups = manifest.groups("train")
    keep = choose_groups(groups, _group_count(len(groups), fraction, count), seed)
    rows = [r for r in manifest.rows if r.split != "train" or r.group_id in keep]
    return Manifest(rows, manifest.root)


def subsample_clip_groups(clips: Sequence[VideoClip], fraction: float | None = None,
                          count: int | None = None, seed: int = 0) -> list[VideoClip]:
    """In-memory counterpart of :func:`subsample_train_groups` for a list of train clips."""
    groups = sorted({c.group_id for c in clips})
    keep = choose_groups(groups, _group_count(len(groups), fraction, count), seed)
    return [c for c in clips if c.group_id in keep]


# --- sampling and batching ---------------------------------------------------

def sample_frames(clip: VideoClip | np.ndarray, k: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``k`` distinct frames uniformly without replacement, kept in temporal order.

    Clips shorter than ``k`` contribute all frames followed by zero-filled, masked slots.
    Returns ``(frames k x C x H x W, mask k)``.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    if k < 1:
        raise ValueError("k must be >= 1")
    t = frames.shape[0]
    if t == 0:
        raise ValueError("empty clip")
    if t >= k:
        idx = np.sort(rng.choice(t, size=k, replace=False))
        return frames[idx], np.ones(k, dtype=bool)
    out = np.zeros((k,) + frames.shape[1:], dtype=frames.dtype)
    out[:t] = frames
    mask = np.zeros(k, dtype=bool)
    mask[:t] = True
    return out, mask


@dataclass
class ClipBatch:
    frames: torch.Tensor         # B x T_max x C x H x W
    mask: torch.Tensor           # B x T_max bool
    labels: torch.Tensor         # B
    clip_ids: list[str]

    def __len__(self) -> int:
        return len(self.clip_ids)


def collate(clips: Sequence[VideoClip], masks: Sequence[np.ndarray] | None = None) -> ClipBatch:
    """Zero-pad clips to the longest one; valid frames are left-packed.

    ``masks`` optionally marks frames already padded inside a clip (as produced
    by :func:`sample_frames`); such masks must be left-packed too.
    """
    if not clips:
        raise ValueError("cannot collate an empty list of clips")
    geom = {c.frames.shape[1:] for c in clips}
    if len(geom) != 1:
        raise ValueError(f"heterogeneous frame geometry in batch: {sorted(geom)}")
    t_max = max(c.num_frames for c in clips)
    b = len(clips)
    frames = np.zeros((b, t_max) + next(iter(geom)), dtype=np.float32)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, c in enumerate(clips):
        m = np.ones(c.num_frames, dtype=bool) if masks is None else np.asarray(masks[i], dtype=bool)
        n = int(m.sum())
        if not m[:n].all():
            raise ValueError(f"mask for clip {c.clip_id!r} is not left-packed")
        frames[i, :n] = c.frames[:n]
        mask[i, :n] = True
    labels = torch.tensor([float(c.label) for c in clips], dtype=torch.float32)
    return ClipBatch(torch.from_numpy(frames), torch.from_numpy(mask), labels,
                     [c.clip_id for c in clips])


def with_frames(clip: VideoClip, frames: np.ndarray) -> VideoClip:
    return replace(clip, frames=frames)
