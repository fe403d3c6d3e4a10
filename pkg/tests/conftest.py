import numpy as np
import pytest
import torch

from forgelab.config import BackboneConfig
from forgelab.synthesis import toy_face_dataset


@pytest.fixture
def tiny_config():
    return BackboneConfig(image_size=32, patch_size=8, embed_dim=32,
                          num_layers=4, num_heads=2, mlp_ratio=2.0)


@pytest.fixture
def toy_faces_small():
    return toy_face_dataset(12, np.random.default_rng(7), image_size=32)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
