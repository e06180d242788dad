"""
The variational posterior. Location inference q(x_M|y) comes in two factorisations, independent (one logits map
reused for all M draws) and autoregressive (each draw conditions on the union of the previous ones). Context values
are a parameter-free lookup into the image, and q(a|x_M, y_M) is a Gaussian computed from the (mask, values) pair.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .distributions import DiagGaussianParams, gumbel_softmax_sample, reparam_gaussian_sample
from .errors import ContractViolation
from .neural_blocks import PPSVAE

logger = logging.getLogger(__name__)

VARIANTS = ['independent', 'autoregressive']


@dataclass
class ContextSet:
    """
    A partial pixel specification of a batch of images.

    mask: B x 1 x H x W binary union of the sampled locations (x_M)
    values: B x C x H x W, the image values on the mask and zero elsewhere (y_M)
    onehots: B x M x K location samples before duplicate removal, in sampling order
    logits: B x M x K posterior logits each sample was drawn from, or None for contexts not drawn from a posterior
    """
    mask: torch.Tensor
    values: torch.Tensor
    onehots: torch.Tensor
    logits: torch.Tensor = None

    @property
    def M(self) -> int:
        return self.onehots.shape[1]

    @property
    def popcount(self) -> torch.Tensor:
        return self.mask.detach().sum(dim=(1, 2, 3)).long()

    @property
    def indices(self) -> torch.Tensor:
        return self.onehots.detach().argmax(dim=-1)

    @property
    def target_mask(self) -> torch.Tensor:
        return complement_mask(self.mask)

    def detach(self):
        return ContextSet(self.mask.detach(), self.values.detach(), self.onehots.detach(),
                          None if self.logits is None else self.logits.detach())


@dataclass
class AbstractLatent:
    """
    A reparameterised sample of the abstract latent a (B x D) and the posterior it was drawn from.
    """
    sample: torch.Tensor
    posterior: DiagGaussianParams


def check_binary(mask: torch.Tensor, name: str = 'mask'):
    values = mask.detach()
    if not bool(((values == 0) | (values == 1)).all()):
        raise ContractViolation(f'{name} must be binary')


def dedup_mask(count_map: torch.Tensor) -> torch.Tensor:
    """
    Collapses per-location sample counts to a binary mask, indicator(count > 0).
    :param count_map: Tensor of non-negative counts
    :return: Binary tensor of the same shape and dtype
    """
    if bool((count_map.detach() < 0).any()):
        raise ContractViolation('Location counts must be non-negative')
    return (count_map > 0).to(count_map.dtype)


def union_mask(onehots: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """
    Binary union of the argmax locations of B x M x K samples, shaped B x 1 x H x W. The backward pass treats the
    union as the plain sum of the samples.
    """
    hard = F.one_hot(onehots.detach().argmax(dim=-1), num_classes=onehots.shape[-1]).to(onehots.dtype)
    soft_sum = onehots.sum(dim=1)
    mask = dedup_mask(hard.sum(dim=1)) + (soft_sum - soft_sum.detach())
    return mask.view(-1, 1, height, width)


def lookup_values(y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Deterministic, parameter-free lookup y * mask, broadcast over channels.
    """
    check_binary(mask)
    if mask.shape[-2:] != y.shape[-2:]:
        raise ContractViolation(f'Mask shape {tuple(mask.shape)} does not match image shape {tuple(y.shape)}')
    return y * mask


def complement_mask(mask: torch.Tensor) -> torch.Tensor:
    check_binary(mask)
    return 1 - mask


def location_logits_independent(model: PPSVAE, y: torch.Tensor) -> torch.Tensor:
    """
    h1: a single B x K logits map over the flattened pixel grid, shared by all M draws.
    """
    model.check_image(y)
    return model.h1(y).flatten(start_dim=1)


def location_logits_autoregressive(model: PPSVAE, y: torch.Tensor, accumulated_mask: torch.Tensor) -> torch.Tensor:
    """
    h2: B x K logits conditioned on the image and the union of the locations drawn so far.
    :param model: The PPSVAE holding h2
    :param y: Images, B x C x H x W
    :param accumulated_mask: Binary B x 1 x H x W mask; all zeros before the first draw
    :return: Logits, B x K
    """
    model.check_image(y)
    check_binary(accumulated_mask, 'accumulated mask')
    return model.h2(torch.cat([y, accumulated_mask], dim=1)).flatten(start_dim=1)


def _draw(logits, temperature, generator, hard, mode):
    if mode:
        return F.one_hot(logits.detach().argmax(dim=-1), num_classes=logits.shape[-1]).to(logits.dtype)
    return gumbel_softmax_sample(logits, temperature, generator, hard=hard)


def check_context_size(M: int, num_locations: int):
    if not 1 <= M < num_locations:
        raise ContractViolation(f'M must satisfy 1 <= M < H*W = {num_locations}, got {M}')


def infer_context(model: PPSVAE, y: torch.Tensor, M: int, temperature: float, generator: torch.Generator,
                  variant: str = 'autoregressive', hard: bool = False, mode: bool = False) -> ContextSet:
    """
    Samples M pixel locations from q(x_M|y), removes duplicates and looks up their values.
    :param model: The PPSVAE
    :param y: Images, B x C x H x W in [0, 1]
    :param M: Number of location draws; 1 <= M < H*W
    :param temperature: Gumbel-Softmax temperature
    :param generator: Source of the Gumbel noise
    :param variant: 'independent' or 'autoregressive'
    :param hard: Whether the returned samples are straight-through one-hots rather than relaxed samples
    :param mode: Select locations without noise: the M most probable ones for the independent variant, the argmax
        at every step for the autoregressive one
    :return: The inferred ContextSet
    """
    height, width = model.config.height, model.config.width
    check_context_size(M, height * width)
    if temperature <= 0:
        raise ContractViolation(f'Temperature must be positive, got {temperature}')
    if variant not in VARIANTS:
        raise ContractViolation(f'Unknown posterior variant "{variant}"; choices are {VARIANTS}')

    if variant == 'independent':
        shared = location_logits_independent(model, y)
        logits = shared.unsqueeze(1).expand(-1, M, -1)
        if mode:
            # M most probable distinct locations
            onehots = F.one_hot(shared.detach().topk(M, dim=-1).indices, num_classes=shared.shape[-1])
            onehots = onehots.to(shared.dtype)
        else:
            onehots = _draw(logits, temperature, generator, hard, mode)
    else:
        accumulated = torch.zeros(y.shape[0], 1, height, width, dtype=y.dtype, device=y.device)
        samples, step_logits = [], []
        for _ in range(M):
            logits = location_logits_autoregressive(model, y, accumulated)
            samples.append(_draw(logits, temperature, generator, hard, mode))
            step_logits.append(logits)
            accumulated = union_mask(torch.stack(samples, dim=1), height, width)
        onehots = torch.stack(samples, dim=1)
        logits = torch.stack(step_logits, dim=1)

    mask = union_mask(onehots, height, width)
    return ContextSet(mask=mask, values=lookup_values(y, mask), onehots=onehots, logits=logits)


def abstract_posterior(model: PPSVAE, ctx: ContextSet) -> DiagGaussianParams:
    mean, raw_scale = model.h3(ctx.mask, ctx.values)
    return DiagGaussianParams.from_raw(mean, raw_scale)


def infer_abstract(model: PPSVAE, ctx: ContextSet, generator: torch.Generator) -> AbstractLatent:
    """
    Samples a ~ q(a|x_M, y_M). h3 only ever sees the (mask, values) pair, so the sampling order of the locations
    cannot influence the result.
    """
    posterior = abstract_posterior(model, ctx)
    return AbstractLatent(sample=reparam_gaussian_sample(posterior, generator), posterior=posterior)
