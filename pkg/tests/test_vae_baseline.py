import pytest
import torch

from pps_vae.errors import ContractViolation
from pps_vae.neural_blocks import ModelConfig
from pps_vae.vae_baseline import (Vae, vae_elbo, vae_encode, vae_generate, vae_iwae_log_marginal,
                                  vae_log_importance_weight, vae_loss, vae_reconstruct, vae_train)


@pytest.fixture
def vae():
    torch.manual_seed(0)
    return Vae(ModelConfig(image_channels=1, height=10, width=10, latent_dim=3, hidden_channels=8, blocks=1))


def test_elbo_terms(vae, random_images, make_generator):
    terms = vae_elbo(vae, random_images(4, height=10, width=10), make_generator(0))
    assert terms.elbo.shape == (4,)
    assert bool((terms.kl >= 0).all())
    assert torch.allclose(terms.elbo, terms.reconstruction - terms.kl)
    assert terms.first_nonfinite_term() is None


def test_prior_posterior_has_no_kl(vae, random_images, make_generator):
    terms = vae_elbo(vae, random_images(4, height=10, width=10), make_generator(0), force_prior=True)
    assert torch.equal(terms.kl, torch.zeros(4))
    assert torch.equal(terms.elbo, terms.reconstruction)


def test_loss_is_mean_negative_elbo(vae, random_images, make_generator):
    y = random_images(3, height=10, width=10)
    loss, terms = vae_loss(vae, y, make_generator(1))
    assert float(loss) == pytest.approx(-float(terms.elbo.mean()))
    with pytest.raises(ContractViolation):
        vae_loss(vae, y[:0], make_generator(1))


def test_shapes(vae, random_images, make_generator):
    y = random_images(2, height=10, width=10)
    assert vae_generate(vae, 5, make_generator(0)).shape == (5, 1, 10, 10)
    assert vae_generate(vae, 2, make_generator(0), sample=True).shape == (2, 1, 10, 10)
    assert vae_reconstruct(vae, y).shape == y.shape
    assert vae_encode(vae, y).shape == (2, 3)
    with pytest.raises(ContractViolation):
        vae_generate(vae, 0, make_generator(0))
    with pytest.raises(ContractViolation):
        vae_encode(vae, random_images(2))


def test_single_sample_iwae(vae, random_images, make_generator):
    y = random_images(3, height=10, width=10)
    with torch.no_grad():
        expected = vae_log_importance_weight(vae, y, make_generator(8))
    assert torch.equal(vae_iwae_log_marginal(vae, y, 1, make_generator(8)), expected)
    with pytest.raises(ContractViolation):
        vae_iwae_log_marginal(vae, y, 0, make_generator(8))


def test_vae_train(small_train_config, small_shapes):
    final, metrics = vae_train(small_train_config, small_shapes)
    assert final.kind == 'vae'
    assert len(metrics) == 5
