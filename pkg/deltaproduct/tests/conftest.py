import pytest
import torch

from deltaproduct.config import ModelConfig


@pytest.fixture(autouse=True, scope='session')
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        layers=1,
        heads=2,
        head_key_dim=4,
        head_value_dim=3,
        n_h=2,
        vocab_size=7,
        model_dim=8,
        mlp_ratio=2,
    )


@pytest.fixture
def rng() -> torch.Generator:
    return torch.Generator().manual_seed(1234)
