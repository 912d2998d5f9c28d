import numpy as np
import pytest

from warpvos import autodiff as ad
from warpvos.network import ModelConfig, Segmenter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in float64 (finite differences need it)."""
    with ad.precision("float64"):
        yield


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        embed_dim=32,
        heads=4,
        ffn_hidden=48,
        window=5,
        slots=6,
        enc_channels=(8, 12, 16, 32),
        dec_channels=16,
        norm_groups=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, **overrides) -> Segmenter:
    return Segmenter(np.random.default_rng(seed), tiny_config(**overrides))
