import numpy as np
import pytest
import torch

from pps_vae.data import synth_shapes
from pps_vae.neural_blocks import PPSVAE, ModelConfig
from pps_vae.train_config import TrainConfig


def _generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


@pytest.fixture
def make_generator():
    return _generator


@pytest.fixture
def tiny_config():
    return ModelConfig(image_channels=1, height=6, width=6, latent_dim=4, hidden_channels=8, blocks=1)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return PPSVAE(tiny_config)


@pytest.fixture
def tiny_model64(tiny_config):
    torch.manual_seed(0)
    return PPSVAE(tiny_config).double()


@pytest.fixture
def rgb_model():
    torch.manual_seed(1)
    return PPSVAE(ModelConfig(image_channels=3, height=8, width=8, latent_dim=4, hidden_channels=8, blocks=1))


@pytest.fixture
def random_images():
    def make(batch, channels=1, height=6, width=6, seed=0, dtype=torch.float32):
        return torch.rand((batch, channels, height, width), generator=_generator(seed), dtype=dtype)
    return make


@pytest.fixture(scope='session')
def small_shapes():
    return synth_shapes(64, 8, 8, 3, seed=0)


@pytest.fixture
def small_train_config():
    """
    A run that finishes in seconds on 8 x 8 synthetic shapes.
    """
    return TrainConfig(M=2, latent_dim=4, channels=8, blocks=1, batch_size=16, max_steps=10, log_every=2,
                       checkpoint_every=0, synth_n=64, synth_size=8, test_n=32, vae_latent_dim=4)


def checksum(module: torch.nn.Module) -> float:
    return float(sum(p.detach().double().abs().sum() for p in module.parameters()))


@pytest.fixture
def parameter_checksum():
    return checksum


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
