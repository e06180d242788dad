"""
The training objective and the log-marginal estimator.

The ELBO has four terms: the ConvCNP log-likelihood of the targets, the KL of the abstract posterior from its
prior, the log-likelihood of the context values under g2, and the location log-ratio
log q(x_M|y) - log p(x_M|a) scored on the pre-dedup samples. Because y_M is a deterministic lookup, its posterior
is a point mass and the y_M log-ratio reduces to -log p(y_M|x_M, a), which is why it appears as +context_ll.
"""
import logging
from dataclasses import dataclass, fields

import torch

from .distributions import (categorical_log_prob, diag_gaussian_log_prob, gaussian_kl_std_normal, log_mean_exp,
                            standard_normal_log_prob, straight_through)
from .errors import ContractViolation
from .generative_model import context_log_likelihood, location_log_prob_under_prior, target_log_likelihood
from .inference_model import AbstractLatent, ContextSet, infer_abstract, infer_context
from .neural_blocks import PPSVAE

logger = logging.getLogger(__name__)


@dataclass
class ElboBreakdown:
    """
    Per-image ELBO terms in nats, each a tensor of shape B.
    """
    target_ll: torch.Tensor
    kl_a: torch.Tensor
    context_ll: torch.Tensor
    location_ratio: torch.Tensor
    elbo: torch.Tensor

    @classmethod
    def from_terms(cls, target_ll, kl_a, context_ll, location_ratio):
        return cls(target_ll, kl_a, context_ll, location_ratio, target_ll - kl_a + context_ll - location_ratio)

    @classmethod
    def cat(cls, breakdowns: list):
        return cls(*(torch.cat([getattr(b, f.name) for b in breakdowns]) for f in fields(cls)))

    def mean(self) -> dict:
        """
        Batch means of every term as plain floats.
        """
        return {f.name: float(getattr(self, f.name).detach().mean()) for f in fields(self)}

    def first_nonfinite_term(self):
        """
        Name of the first term holding a non-finite value, or None if all are finite.
        """
        for f in fields(self):
            if not bool(torch.isfinite(getattr(self, f.name).detach()).all()):
                return f.name
        return None


@dataclass
class SampleScores:
    """
    Every factor evaluated at one posterior sample, per image.
    """
    target_ll: torch.Tensor
    context_ll: torch.Tensor
    kl_a: torch.Tensor
    log_q_locations: torch.Tensor
    log_p_locations: torch.Tensor
    log_prior_a: torch.Tensor
    log_posterior_a: torch.Tensor

    @property
    def location_ratio(self):
        return self.log_q_locations - self.log_p_locations

    @property
    def log_joint(self):
        return self.log_prior_a + self.log_p_locations + self.context_ll + self.target_ll

    @property
    def log_posterior(self):
        return self.log_q_locations + self.log_posterior_a


def score_sample(model: PPSVAE, y: torch.Tensor, ctx: ContextSet, latent: AbstractLatent) -> SampleScores:
    """
    Evaluates all generative and variational factors at a sampled (x_M, a).
    """
    onehots = straight_through(ctx.onehots)
    a = latent.sample
    return SampleScores(
        target_ll=target_log_likelihood(model, y, ctx.mask, ctx.values),
        context_ll=context_log_likelihood(model, y, ctx.mask, a),
        kl_a=gaussian_kl_std_normal(latent.posterior, batch_dims=1),
        log_q_locations=categorical_log_prob(onehots, ctx.logits).sum(dim=1),
        log_p_locations=location_log_prob_under_prior(model, onehots, a),
        log_prior_a=standard_normal_log_prob(a, batch_dims=1),
        log_posterior_a=diag_gaussian_log_prob(a, latent.posterior, batch_dims=1),
    )


def _sample_scores(model, y, M, temperature, generator, variant, hard):
    model.check_image(y)
    ctx = infer_context(model, y, M, temperature, generator, variant=variant, hard=hard)
    latent = infer_abstract(model, ctx, generator)
    return score_sample(model, y, ctx, latent)


def elbo_terms(model: PPSVAE, y: torch.Tensor, M: int, temperature: float, generator: torch.Generator,
               variant: str = 'autoregressive', hard: bool = False) -> ElboBreakdown:
    """
    Single-sample estimate of the four ELBO terms for a batch of images, differentiable with respect to every
    parameter given the noise.
    :param model: The PPSVAE
    :param y: Images, B x C x H x W in [0, 1]
    :param M: Number of location draws
    :param temperature: Gumbel-Softmax temperature
    :param generator: Source of all posterior noise
    :param variant: 'independent' or 'autoregressive'
    :param hard: Whether location samples are straight-through one-hots
    :return: ElboBreakdown with B entries per term
    """
    scores = _sample_scores(model, y, M, temperature, generator, variant, hard)
    return ElboBreakdown.from_terms(scores.target_ll, scores.kl_a, scores.context_ll, scores.location_ratio)


def training_loss(model: PPSVAE, batch: torch.Tensor, M: int, temperature: float, generator, variant: str =
                  'autoregressive', hard: bool = False, return_breakdown: bool = False):
    """
    Mean negative ELBO over a batch, one posterior sample per image.
    :param generator: A generator shared by the batch, or a sequence of generators, one per image
    :param return_breakdown: Also return the per-image ElboBreakdown
    """
    if batch.shape[0] == 0:
        raise ContractViolation('training_loss needs a non-empty batch')
    if isinstance(generator, (list, tuple)):
        if len(generator) != batch.shape[0]:
            raise ContractViolation('Need exactly one generator per image')
        breakdown = ElboBreakdown.cat([elbo_terms(model, batch[i:i + 1], M, temperature, g, variant, hard)
                                       for i, g in enumerate(generator)])
    else:
        breakdown = elbo_terms(model, batch, M, temperature, generator, variant, hard)
    loss = -breakdown.elbo.mean()
    return (loss, breakdown) if return_breakdown else loss


def log_importance_weight(model: PPSVAE, y: torch.Tensor, M: int, temperature: float, generator: torch.Generator,
                          variant: str = 'autoregressive', hard: bool = True) -> torch.Tensor:
    """
    log p(a, x, y|M) - log q(a, x_M|y, M) at one posterior sample: the single-sample ELBO estimate. It differs from
    ElboBreakdown.elbo only in using log p(a) - log q(a|.) in place of the closed-form KL.
    """
    scores = _sample_scores(model, y, M, temperature, generator, variant, hard)
    return scores.log_joint - scores.log_posterior


@torch.no_grad()
def iwae_log_marginal(model: PPSVAE, y: torch.Tensor, M: int, K: int, temperature: float,
                      generator: torch.Generator, variant: str = 'autoregressive', hard: bool = True) -> torch.Tensor:
    """
    Importance-weighted estimate of log p(y|M) from K posterior samples per image.
    :param K: Number of importance samples, at least 1
    :return: B estimates in nats
    """
    if K < 1:
        raise ContractViolation(f'IWAE needs K >= 1, got {K}')
    weights = torch.stack([log_importance_weight(model, y, M, temperature, generator, variant, hard)
                           for _ in range(K)])
    return log_mean_exp(weights, dim=0)
