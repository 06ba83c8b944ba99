import numpy as np
import pytest
import torch

from tryonlab import synth
from tryonlab.model import ModelConfig, TryOnModel


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(embed_dim=64, num_heads=4, depth=2, patch_size=4,
                       max_tokens=600)


@pytest.fixture()
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return TryOnModel(tiny_config)


@pytest.fixture(scope="session")
def scene64():
    spec = synth.SceneSpec(seed=3, canvas_size=(64, 64),
                           background_mode="natural", texture_seed=7)
    person = synth.render_person(spec)
    return spec, person, synth.layout_for(spec)


def randomize_base(model, scale=0.02, seed=1):
    """Give the frozen base nonzero weights so structural tests see signal;
    adapter tensors stay untouched (B remains zero)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "lora_" not in name:
                p.add_(torch.randn(p.shape, generator=gen) * scale)
    return model
