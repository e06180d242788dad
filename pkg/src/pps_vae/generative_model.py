"""
The generative factorisation p(a) p(x_M|a) p(y_M|x_M, a) p(y_T|x_T, x_M, y_M), and the two pipelines built on it:
unconditional generation and reconstruction of an image from its inferred context set.
"""
import logging
from dataclasses import dataclass

import torch

from .distributions import (DiagGaussianParams, categorical_log_prob, diag_gaussian_log_prob, gumbel_softmax_sample,
                            reparam_gaussian_sample, standard_normal_log_prob, straight_through)
from .errors import ContractViolation
from .inference_model import (abstract_posterior, check_binary, check_context_size, complement_mask, infer_context,
                              union_mask)
from .neural_blocks import PPSVAE, spatial_broadcast

logger = logging.getLogger(__name__)


class CnpPrediction(DiagGaussianParams):
    """
    Per-pixel predictive mean and scale of the ConvCNP, both B x C x H x W.
    """


@dataclass
class GenerationTrace:
    """
    Intermediate variables of one generation or reconstruction pass, batched along the first axis. image equals
    context_values + target_values exactly; values are not clamped to [0, 1].
    """
    a: torch.Tensor
    mask: torch.Tensor
    onehots: torch.Tensor
    context_values: torch.Tensor
    target_values: torch.Tensor
    image: torch.Tensor

    def __len__(self):
        return self.image.shape[0]

    def split(self) -> list:
        """
        Splits a batched trace into single-image traces (each keeps a batch axis of size one).
        """
        return [GenerationTrace(*(field[i:i + 1] for field in self._fields())) for i in range(len(self))]

    def _fields(self):
        return self.a, self.mask, self.onehots, self.context_values, self.target_values, self.image

    @classmethod
    def stack(cls, traces: list):
        return cls(*(torch.cat(parts, dim=0) for parts in zip(*(trace._fields() for trace in traces))))


def prior_location_logits(model: PPSVAE, a: torch.Tensor) -> torch.Tensor:
    """
    g1: one B x K logits map over pixel locations, shared by the M independent prior draws.
    """
    c = model.config
    return model.g1(spatial_broadcast(a, c.height, c.width)).flatten(start_dim=1)


def location_log_prob_under_prior(model: PPSVAE, onehots: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """
    Sum over the (pre-dedup) location samples of log p(x_m|a).
    :param model: The PPSVAE
    :param onehots: B x M x K one-hot samples
    :param a: B x D abstract latents
    :return: B log-probabilities
    """
    if onehots.dim() != 3 or onehots.shape[1] == 0:
        raise ContractViolation('Scoring under the location prior needs at least one location sample')
    logits = prior_location_logits(model, a)
    return categorical_log_prob(onehots, logits.unsqueeze(1)).sum(dim=1)


def predict_context_values(model: PPSVAE, mask: torch.Tensor, a: torch.Tensor) -> DiagGaussianParams:
    """
    g2: Gaussian parameters of the context values given the location mask and the abstract latent. Only the
    on-mask entries enter the likelihood.
    """
    check_binary(mask)
    c = model.config
    out = model.g2(torch.cat([mask, spatial_broadcast(a, c.height, c.width)], dim=1))
    mean, raw_scale = out.chunk(2, dim=1)
    return DiagGaussianParams.from_raw(mean, raw_scale)


def context_log_likelihood(model: PPSVAE, y: torch.Tensor, mask: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """
    log p(y_M|x_M, a) as a masked sum over pixels and channels; zero for an empty mask.
    """
    return diag_gaussian_log_prob(y, predict_context_values(model, mask, a), mask=mask, batch_dims=1)


def convcnp_predict(model: PPSVAE, mask: torch.Tensor, values: torch.Tensor) -> CnpPrediction:
    """
    g3: the convolutional deep set. The context enters only as the density channel (the mask) concatenated with
    the masked values, so any ordering of the same locations gives the same prediction.
    :param model: The PPSVAE
    :param mask: Binary B x 1 x H x W context mask
    :param values: B x C x H x W, zero off the mask
    :return: The per-pixel predictive distribution
    """
    check_binary(mask)
    if bool((values.detach() * (1 - mask.detach())).abs().gt(0).any()):
        raise ContractViolation('Context values must be zero off the context mask')
    mean, raw_scale = model.g3(torch.cat([mask, values], dim=1)).chunk(2, dim=1)
    prediction = DiagGaussianParams.from_raw(mean, raw_scale)
    return CnpPrediction(prediction.mean, prediction.scale)


def target_log_likelihood(model: PPSVAE, y: torch.Tensor, mask: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """
    log p(y_T|x_T, x_M, y_M) summed over the complement of the mask.
    """
    return diag_gaussian_log_prob(y, convcnp_predict(model, mask, values), mask=complement_mask(mask), batch_dims=1)


def _mean_or_sample(params: DiagGaussianParams, generator, sample: bool):
    return reparam_gaussian_sample(params, generator) if sample else params.mean


@torch.no_grad()
def generate_unconditional(model: PPSVAE, n: int, M: int, temperature: float, generator: torch.Generator,
                           sample_context: bool = False, sample_targets: bool = False) -> list:
    """
    Ancestral sampling: a ~ N(0, I), M hard location draws from the prior, duplicate removal, context values from
    g2 and target values from the ConvCNP. The image is the sum of the two value maps.
    :param model: The PPSVAE
    :param n: Number of images
    :param M: Number of location draws
    :param temperature: Gumbel-Softmax temperature for the prior draws
    :param generator: Seeded generator
    :param sample_context: Draw y_M from g2 instead of taking its mean
    :param sample_targets: Draw y_T from the ConvCNP instead of taking its mean
    :return: A list of n single-image GenerationTraces
    """
    c = model.config
    if n < 1:
        raise ContractViolation(f'Need at least one sample, got n={n}')
    check_context_size(M, c.num_locations)
    dtype = next(model.parameters()).dtype
    a = torch.randn((n, c.latent_dim), generator=generator, dtype=dtype, device=generator.device)
    logits = prior_location_logits(model, a).unsqueeze(1).expand(-1, M, -1)
    onehots = gumbel_softmax_sample(logits, temperature, generator, hard=True)
    mask = union_mask(onehots, c.height, c.width)

    context_values = mask * _mean_or_sample(predict_context_values(model, mask, a), generator, sample_context)
    prediction = convcnp_predict(model, mask, context_values)
    target_values = complement_mask(mask) * _mean_or_sample(prediction, generator, sample_targets)
    trace = GenerationTrace(a, mask, onehots, context_values, target_values, context_values + target_values)
    logger.debug('Generated %d images, mean context size %.2f', n, float(mask.sum(dim=(1, 2, 3)).mean()))
    return trace.split()


@torch.no_grad()
def reconstruct(model: PPSVAE, y: torch.Tensor, M: int, temperature: float, generator: torch.Generator,
                variant: str = 'autoregressive', hard: bool = True, mode: bool = False) -> GenerationTrace:
    """
    Infers a context set for each image, keeps the true values on it and fills the rest with the ConvCNP mean.
    a holds the mean of q(a|x_M, y_M).
    """
    ctx = infer_context(model, y, M, temperature, generator, variant=variant, hard=hard, mode=mode)
    a = abstract_posterior(model, ctx).mean
    prediction = convcnp_predict(model, ctx.mask, ctx.values)
    target_values = ctx.target_mask * prediction.mean
    return GenerationTrace(a, ctx.mask, ctx.onehots, ctx.values, target_values, ctx.values + target_values)


def score_trace(model: PPSVAE, trace: GenerationTrace) -> torch.Tensor:
    """
    Joint log-density of a batched trace under the generative model: log p(a) + sum_m log p(x_m|a)
    + log p(y_M|x_M, a) + log p(y_T|x_T, x_M, y_M).
    """
    onehots = straight_through(trace.onehots)
    return (standard_normal_log_prob(trace.a, batch_dims=1)
            + location_log_prob_under_prior(model, onehots, trace.a)
            + context_log_likelihood(model, trace.image, trace.mask, trace.a)
            + target_log_likelihood(model, trace.image, trace.mask, trace.context_values))
