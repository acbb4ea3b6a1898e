import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from seaice.fixtures import synthetic_scene  # noqa: E402
from seaice.scene_store import Scene  # noqa: E402


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def feb_scene() -> Scene:
    return synthetic_scene(month=2, size=128, seed=0)


def make_scene(h=16, w=16, month=3, fill=1.0, labels=None, scene_id=None):
    channels = np.full((3, h, w), fill, dtype=np.float32)
    if labels is None:
        labels = np.zeros((h, w), dtype=np.uint8)
    return Scene.from_arrays(scene_id or f"2018-{month:02d}", month, channels, labels)
