"""
Reparameterisable probability primitives shared by the inference model, the generative model and the objective:
Gumbel noise, the Gumbel-Softmax relaxation of a categorical over pixel locations, diagonal Gaussians and a stable
log-mean-exp.

All samplers draw from an explicit torch.Generator, so every result is a deterministic function of its inputs and
the generator state.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch.distributions import Normal, kl_divergence

from .errors import ContractViolation

SCALE_FLOOR = 1e-4
UNIFORM_EPS = 1e-10


@dataclass
class DiagGaussianParams:
    """
    Mean and scale of a diagonal Gaussian. Both tensors share one shape.
    """
    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise ContractViolation(f'Gaussian mean shape {tuple(self.mean.shape)} does not match scale shape '
                                    f'{tuple(self.scale.shape)}')

    @classmethod
    def from_raw(cls, mean: torch.Tensor, raw_scale: torch.Tensor, scale_floor: float = SCALE_FLOOR):
        """
        Builds parameters from unconstrained network outputs; the scale is softplus(raw) + scale_floor.
        :param mean: Mean tensor
        :param raw_scale: Unconstrained scale tensor of the same shape
        :param scale_floor: Lower bound added to every scale
        :return: A DiagGaussianParams instance
        """
        return cls(mean, F.softplus(raw_scale) + scale_floor)

    @classmethod
    def standard(cls, like: torch.Tensor):
        return cls(torch.zeros_like(like), torch.ones_like(like))

    def check_positive(self):
        if not bool((self.scale.detach() > 0).all()):
            raise ContractViolation('Gaussian scale must be strictly positive')
        return self

    def as_distribution(self) -> Normal:
        return Normal(self.mean, self.scale, validate_args=False)


def _sum_trailing(values: torch.Tensor, batch_dims: int) -> torch.Tensor:
    if values.dim() <= batch_dims:
        return values
    return values.sum(dim=tuple(range(batch_dims, values.dim())))


def gumbel_from_uniform(u: torch.Tensor) -> torch.Tensor:
    """
    Maps uniform draws to standard Gumbel draws, g = -log(-log(u)).
    """
    return -torch.log(-torch.log(u))


def sample_gumbel(shape, generator: torch.Generator, dtype=torch.float32, device=None) -> torch.Tensor:
    """
    Draws i.i.d. standard Gumbel noise. Uniforms are drawn in double precision and clamped to
    [UNIFORM_EPS, 1 - UNIFORM_EPS] so the double logarithm never sees 0 or 1.
    :param shape: Non-empty sequence of dimensions
    :param generator: Seeded torch.Generator
    :param dtype: Output dtype
    :param device: Output device; defaults to the generator's device
    :return: Tensor of Gumbel draws with the requested shape
    """
    shape = tuple(shape)
    if len(shape) == 0:
        raise ContractViolation('sample_gumbel requires a non-empty shape')
    if device is None:
        device = generator.device
    u = torch.rand(shape, generator=generator, dtype=torch.float64, device=device)
    u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return gumbel_from_uniform(u).to(dtype)


def straight_through(sample: torch.Tensor) -> torch.Tensor:
    """
    Returns the one-hot of the argmax of sample along the last axis. The value is exactly one-hot while the
    gradient is that of the soft sample.
    """
    index = sample.detach().argmax(dim=-1)
    hard = F.one_hot(index, num_classes=sample.shape[-1]).to(sample.dtype)
    return hard + (sample - sample.detach())


def gumbel_softmax_sample(logits: torch.Tensor, temperature: float, generator: torch.Generator = None,
                          hard: bool = False, gumbel: torch.Tensor = None) -> torch.Tensor:
    """
    Draws a Gumbel-Softmax sample over the last axis of logits.
    :param logits: Tensor of shape [..., K]
    :param temperature: Relaxation temperature; must be positive
    :param generator: Generator for the Gumbel noise; ignored if gumbel is given
    :param hard: Whether to return a straight-through one-hot sample
    :param gumbel: Optional precomputed Gumbel noise with the shape of logits
    :return: A point on the simplex (or a vertex of it when hard)
    """
    if temperature <= 0:
        raise ContractViolation(f'Gumbel-Softmax temperature must be positive, got {temperature}')
    if logits.shape[-1] < 1:
        raise ContractViolation('Gumbel-Softmax needs at least one category')
    if gumbel is None:
        gumbel = sample_gumbel(logits.shape, generator, dtype=logits.dtype, device=logits.device)
    soft = torch.softmax((logits + gumbel) / temperature, dim=-1)
    if hard:
        return straight_through(soft)
    return soft


def check_one_hot(one_hot: torch.Tensor):
    values = one_hot.detach()
    binary = bool(((values == 0) | (values == 1)).all())
    if not binary or not bool((values.sum(dim=-1) == 1).all()):
        raise ContractViolation('Expected exactly one hot entry per one-hot vector')


def categorical_log_prob(one_hot: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """
    Log-probability of a one-hot outcome under softmax(logits). Broadcasts over leading dimensions. Gradients flow
    into both the logits and the (straight-through) one-hot vector.
    :param one_hot: Tensor [..., K] with exactly one 1 per vector
    :param logits: Tensor [..., K]
    :return: Tensor [...] of log-probabilities
    """
    check_one_hot(one_hot)
    log_p = torch.log_softmax(logits, dim=-1)
    # -inf entries would turn 0 * -inf into NaN
    log_p = torch.where(torch.isfinite(log_p), log_p, torch.full_like(log_p, torch.finfo(log_p.dtype).min))
    return (one_hot * log_p).sum(dim=-1)


def diag_gaussian_log_prob(x: torch.Tensor, params: DiagGaussianParams, mask: torch.Tensor = None,
                           batch_dims: int = 0) -> torch.Tensor:
    """
    Sum of elementwise Gaussian log-densities, -1/2 log(2 pi sigma^2) - (x - mu)^2 / (2 sigma^2).
    :param x: Observed values
    :param params: Gaussian parameters with the shape of x
    :param mask: Optional weights broadcastable to x; elements with weight 0 do not contribute
    :param batch_dims: Number of leading dimensions to keep
    :return: Tensor with the leading batch_dims dimensions of x
    """
    if x.shape != params.mean.shape:
        raise ContractViolation(f'Observation shape {tuple(x.shape)} does not match Gaussian shape '
                                f'{tuple(params.mean.shape)}')
    log_density = params.as_distribution().log_prob(x)
    if mask is not None:
        log_density = log_density * mask
    return _sum_trailing(log_density, batch_dims)


def standard_normal_log_prob(x: torch.Tensor, batch_dims: int = 0) -> torch.Tensor:
    return diag_gaussian_log_prob(x, DiagGaussianParams.standard(x), batch_dims=batch_dims)


def gaussian_kl_std_normal(params: DiagGaussianParams, batch_dims: int = 0) -> torch.Tensor:
    """
    Closed-form KL[N(mu, sigma^2) || N(0, 1)], summed over the non-batch dimensions.
    """
    params.check_positive()
    prior = Normal(torch.zeros_like(params.mean), torch.ones_like(params.scale), validate_args=False)
    return _sum_trailing(kl_divergence(params.as_distribution(), prior), batch_dims)


def reparam_gaussian_sample(params: DiagGaussianParams, generator: torch.Generator) -> torch.Tensor:
    """
    Reparameterised sample mu + sigma * eps with eps ~ N(0, 1) drawn from the generator.
    """
    eps = torch.randn(params.mean.shape, generator=generator, dtype=params.mean.dtype, device=params.mean.device)
    return params.mean + params.scale * eps


def log_mean_exp(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """
    log(1/K sum_k exp(v_k)) along dim, computed with max subtraction.
    """
    if values.numel() == 0 or values.shape[dim] == 0:
        raise ContractViolation('log_mean_exp of an empty input')
    peak = values.detach().amax(dim=dim, keepdim=True)
    peak = torch.where(torch.isfinite(peak), peak, torch.zeros_like(peak))
    shifted = torch.exp(values - peak).mean(dim=dim, keepdim=True)
    return (peak + torch.log(shifted)).squeeze(dim)
