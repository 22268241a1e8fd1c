import numpy as np
import pytest
import torch

from usvid.dataio import VideoClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_clip(t=6, c=3, size=8, label=0.0, clip_id="c0", group_id="g0", split="train",
              task="keyframe", seed=0):
    frames = np.random.default_rng(seed).random((t, c, size, size), dtype=np.float32)
    return VideoClip(frames, float(label), clip_id, group_id, split, task)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
