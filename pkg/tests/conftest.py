import numpy as np
import pytest

from splitft.nn import ModelConfig


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=12, seq_len=4, d_model=8, ffn_dim=16, n_blocks=2, n_heads=2, n_classes=3)


@pytest.fixture
def default_cfg():
    return ModelConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
