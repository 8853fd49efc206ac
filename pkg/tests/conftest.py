import numpy as np
import pytest

from gtpvit.reduction import ReductionConfig
from gtpvit.runtime import ModelConfig, generate_fixture, preset


def toy_config(p=0, depth=3, has_cls=True, **red_kwargs) -> ModelConfig:
    """4x4 patch grid, 32-dim, 4-head toy model for fast runtime tests."""
    red = ReductionConfig(p_per_layer=p, **red_kwargs)
    return ModelConfig(
        image_size=64,
        patch_size=16,
        embed_dim=32,
        depth=depth,
        heads=4,
        has_cls=has_cls,
        num_classes=10,
        reduction=red,
    )


@pytest.fixture(scope="session")
def deit_s_fixture():
    cfg = preset("deit-s")
    store, image = generate_fixture(42, cfg)
    return store, image


@pytest.fixture(scope="session")
def vitm_fixture():
    cfg = preset("vitm-gap")
    store, image = generate_fixture(42, cfg)
    return store, image
