"""
The single-latent VAE baseline: a Gaussian z encoded from the whole image and a per-pixel Gaussian decoder, trained
on the standard ELBO E_q[log p(y|z)] - KL(q(z|y) || N(0, I)).
"""
import dataclasses
import logging
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import (DiagGaussianParams, diag_gaussian_log_prob, gaussian_kl_std_normal, log_mean_exp,
                            reparam_gaussian_sample, standard_normal_log_prob)
from .errors import ContractViolation
from .neural_blocks import ConvNet, ModelConfig, initialize_parameters

logger = logging.getLogger(__name__)

POOLED_SIZE = 8


class Vae(nn.Module):
    """
    Encoder: ConvNet features pooled to at most 8 x 8, then a linear map to the mean and raw scale of q(z|y).
    Decoder: a linear map from z to an 8 x 8 feature grid, nearest-neighbour upsampling to H x W and a ConvNet
    head giving the per-pixel mean and raw scale. config.latent_dim is the size of z.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, width = config.image_channels, config.hidden_channels
        self.grid = (min(config.height, POOLED_SIZE), min(config.width, POOLED_SIZE))
        cells = self.grid[0] * self.grid[1]
        self.encoder = ConvNet(c, width, config)
        self.to_posterior = nn.Linear(width * cells, 2 * config.latent_dim)
        self.from_latent = nn.Linear(config.latent_dim, width * cells)
        self.decoder = ConvNet(width, 2 * c, config)
        initialize_parameters(self, config.negative_slope)
        logger.debug('Built VAE with %d parameters', sum(p.numel() for p in self.parameters()))

    @property
    def image_shape(self) -> tuple:
        return self.config.image_channels, self.config.height, self.config.width

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def check_image(self, y: torch.Tensor):
        if y.dim() != 4 or tuple(y.shape[1:]) != self.image_shape:
            raise ContractViolation(f'Expected images of shape B x {self.image_shape}, got {tuple(y.shape)}')


def vae_posterior(vae: Vae, y: torch.Tensor) -> DiagGaussianParams:
    vae.check_image(y)
    features = F.adaptive_avg_pool2d(vae.encoder(y), vae.grid).flatten(start_dim=1)
    mean, raw_scale = vae.to_posterior(features).chunk(2, dim=-1)
    return DiagGaussianParams.from_raw(mean, raw_scale)


def vae_decode(vae: Vae, z: torch.Tensor) -> DiagGaussianParams:
    c = vae.config
    grid = vae.from_latent(z).view(-1, c.hidden_channels, *vae.grid)
    upsampled = F.interpolate(grid, size=(c.height, c.width), mode='nearest')
    mean, raw_scale = vae.decoder(upsampled).chunk(2, dim=1)
    return DiagGaussianParams.from_raw(mean, raw_scale)


@dataclass
class VaeElbo:
    """
    Per-image terms in nats, each of shape B.
    """
    reconstruction: torch.Tensor
    kl: torch.Tensor
    elbo: torch.Tensor

    def mean(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach().mean()) for f in fields(self)}

    def first_nonfinite_term(self):
        for f in fields(self):
            if not bool(torch.isfinite(getattr(self, f.name).detach()).all()):
                return f.name
        return None


def vae_elbo(vae: Vae, y: torch.Tensor, generator: torch.Generator, force_prior: bool = False) -> VaeElbo:
    """
    Single-sample ELBO of each image.
    :param vae: The Vae
    :param y: Images, B x C x H x W
    :param generator: Source of the reparameterisation noise
    :param force_prior: Replace q(z|y) by the prior N(0, I), which zeroes the KL term
    :return: VaeElbo
    """
    posterior = vae_posterior(vae, y)
    if force_prior:
        posterior = DiagGaussianParams.standard(posterior.mean)
    z = reparam_gaussian_sample(posterior, generator)
    reconstruction = diag_gaussian_log_prob(y, vae_decode(vae, z), batch_dims=1)
    kl = gaussian_kl_std_normal(posterior, batch_dims=1)
    return VaeElbo(reconstruction, kl, reconstruction - kl)


def vae_loss(vae: Vae, y: torch.Tensor, generator: torch.Generator):
    """
    Mean negative ELBO of a batch, with the per-image terms.
    """
    if y.shape[0] == 0:
        raise ContractViolation('vae_loss needs a non-empty batch')
    terms = vae_elbo(vae, y, generator)
    return -terms.elbo.mean(), terms


def vae_train(config, ds, out_dir: str = None, show_progress: bool = False):
    """
    Trains the baseline with the shared training loop; config is a TrainConfig whose vae_latent_dim sizes z.
    """
    from .training import train
    return train(dataclasses.replace(config, model='vae'), ds, out_dir=out_dir, show_progress=show_progress)


@torch.no_grad()
def vae_generate(vae: Vae, n: int, generator: torch.Generator, sample: bool = False) -> torch.Tensor:
    """
    Decodes z ~ N(0, I) into n images, n x C x H x W; the decoder mean unless sample is set.
    """
    if n < 1:
        raise ContractViolation(f'Need at least one sample, got n={n}')
    dtype = next(vae.parameters()).dtype
    z = torch.randn((n, vae.latent_dim), generator=generator, dtype=dtype, device=generator.device)
    decoded = vae_decode(vae, z)
    return reparam_gaussian_sample(decoded, generator) if sample else decoded.mean


@torch.no_grad()
def vae_reconstruct(vae: Vae, y: torch.Tensor) -> torch.Tensor:
    return vae_decode(vae, vae_posterior(vae, y).mean).mean


@torch.no_grad()
def vae_encode(vae: Vae, y: torch.Tensor) -> torch.Tensor:
    """
    Posterior means of z, B x latent_dim.
    """
    return vae_posterior(vae, y).mean


def vae_log_importance_weight(vae: Vae, y: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    posterior = vae_posterior(vae, y)
    z = reparam_gaussian_sample(posterior, generator)
    return (diag_gaussian_log_prob(y, vae_decode(vae, z), batch_dims=1) + standard_normal_log_prob(z, batch_dims=1)
            - diag_gaussian_log_prob(z, posterior, batch_dims=1))


@torch.no_grad()
def vae_iwae_log_marginal(vae: Vae, y: torch.Tensor, K: int, generator: torch.Generator) -> torch.Tensor:
    """
    Importance-weighted estimate of log p(y) from K posterior samples per image, B values in nats.
    """
    if K < 1:
        raise ContractViolation(f'IWAE needs K >= 1, got {K}')
    weights = torch.stack([vae_log_importance_weight(vae, y, generator) for _ in range(K)])
    return log_mean_exp(weights, dim=0)
