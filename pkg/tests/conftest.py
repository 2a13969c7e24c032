import numpy as np
import pytest
import torch
import torch.nn as nn

from wildmoco.encoder import EncoderState
from wildmoco.run_config import AugPolicy
from wildmoco.tiling import BoundingBox, SourceFrame


class ToyBackbone(nn.Module):
    """Flatten + one tanh layer; smooth, so finite differences are meaningful."""

    def __init__(self, in_dim=3 * 8 * 8, out_dim=16):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.out_dim = out_dim

    def forward(self, x):
        return torch.tanh(self.fc(torch.flatten(x, 1)))


@pytest.fixture
def toy_state():
    def build(seed=0, feature_dim=8, hidden=16):
        torch.manual_seed(seed)
        return EncoderState(ToyBackbone(), feature_dim=feature_dim, head_hidden=hidden).double()
    return build


@pytest.fixture
def make_frame():
    def build(frame_id="f0", width=256, height=256, boxes=(), seed=0):
        pixels = np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        return SourceFrame(frame_id, pixels, [BoundingBox(*b) for b in boxes])
    return build


@pytest.fixture
def unit_rows():
    def build(rng, n, d):
        x = rng.standard_normal((n, d))
        return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))
    return build


@pytest.fixture
def small_policy():
    return AugPolicy(crop_size=32, blur_kernel=9)


@pytest.fixture
def toy_views():
    def build(n=4, seed=0, roles=("I", "I1", "I2", "I_plus")):
        gen = torch.Generator().manual_seed(seed)
        return {role: torch.rand(n, 3, 8, 8, generator=gen, dtype=torch.float64) for role in roles}
    return build
