"""
Shared parametric building blocks: a ConvNeXt-style residual block with a leaky activation, full-resolution
convolutional heads, the spatial broadcast of the abstract latent, and the PPSVAE module that owns every network.
"""
import logging
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .errors import ContractViolation

logger = logging.getLogger(__name__)

PADDING_MODES = ['zeros', 'circular']


@dataclass
class ModelConfig:
    """
    Shape and width settings for a PPSVAE. image_channels/height/width describe the data; the rest sizes the
    networks.
    """
    image_channels: int = 1
    height: int = 16
    width: int = 16
    latent_dim: int = 32
    hidden_channels: int = 32
    blocks: int = 3
    kernel_size: int = 3
    negative_slope: float = 0.01
    padding_mode: str = 'zeros'
    normalize: bool = True
    expansion: int = 4

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractViolation(f'kernel_size must be odd and positive, got {self.kernel_size}')
        if self.hidden_channels < 1 or self.latent_dim < 1:
            raise ContractViolation('hidden_channels and latent_dim must be at least 1')
        if self.padding_mode not in PADDING_MODES:
            raise ContractViolation(f'padding_mode must be one of {PADDING_MODES}, got "{self.padding_mode}"')
        if not 0 < self.negative_slope < 1:
            raise ContractViolation('negative_slope must lie in (0, 1)')

    @property
    def num_locations(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return asdict(self)


class ChannelLayerNorm(nn.LayerNorm):
    """
    LayerNorm over the channel axis of a B x C x H x W tensor, applied independently at every pixel.
    """

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    """
    Residual block: depthwise k x k convolution, channel norm, pointwise expansion, leaky ReLU, pointwise projection,
    additive skip. Same-padding keeps H x W unchanged.
    """

    def __init__(self, channels: int, kernel_size: int = 3, negative_slope: float = 0.01, padding_mode: str = 'zeros',
                 normalize: bool = True, expansion: int = 4):
        super().__init__()
        if channels < 1:
            raise ContractViolation('ConvBlock needs at least one channel')
        if kernel_size % 2 == 0:
            raise ContractViolation(f'ConvBlock kernel_size must be odd, got {kernel_size}')
        self.channels = channels
        self.depthwise = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels,
                                   padding_mode=padding_mode)
        self.norm = ChannelLayerNorm(channels) if normalize else nn.Identity()
        self.expand = nn.Conv2d(channels, expansion * channels, 1)
        self.activation = nn.LeakyReLU(negative_slope)
        self.project = nn.Conv2d(expansion * channels, channels, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ContractViolation(f'ConvBlock expects {self.channels} channels, got input of shape {tuple(x.shape)}')
        return x + self.project(self.activation(self.expand(self.norm(self.depthwise(x)))))


def conv_block_apply(block: ConvBlock, x: torch.Tensor) -> torch.Tensor:
    """
    Applies a block to a single Ch x H x W array or a batch of them.
    """
    if x.dim() == 3:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


class ConvNet(nn.Module):
    """
    Stem convolution into the hidden width, a stack of ConvBlocks and a 1 x 1 output projection. Never changes the
    spatial resolution.
    """

    def __init__(self, in_channels: int, out_channels: int, config: ModelConfig):
        super().__init__()
        k = config.kernel_size
        width = config.hidden_channels
        self.stem = nn.Conv2d(in_channels, width, k, padding=k // 2, padding_mode=config.padding_mode)
        self.blocks = nn.Sequential(*[
            ConvBlock(width, k, config.negative_slope, config.padding_mode, config.normalize, config.expansion)
            for _ in range(config.blocks)
        ])
        self.head = nn.Conv2d(width, out_channels, 1)

    def forward(self, x):
        return self.head(self.blocks(self.stem(x)))


class AbstractEncoder(nn.Module):
    """
    h3: convolutional features of (mask, values), mean-pooled over space, mapped to the mean and raw scale of q(a|.)
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.features = ConvNet(1 + config.image_channels, config.hidden_channels, config)
        self.to_params = nn.Linear(config.hidden_channels, 2 * config.latent_dim)

    def forward(self, mask, values):
        pooled = self.features(torch.cat([mask, values], dim=1)).mean(dim=(2, 3))
        return self.to_params(pooled).chunk(2, dim=-1)


def spatial_broadcast(a: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """
    Copies the latent vector to every spatial location.
    :param a: Tensor of shape [D] or [B, D]
    :param height: Output height
    :param width: Output width
    :return: Tensor of shape [D, H, W] or [B, D, H, W]
    """
    if height < 1 or width < 1 or a.shape[-1] < 1:
        raise ContractViolation('spatial_broadcast needs D, H, W >= 1')
    return a[..., None, None].expand(*a.shape, height, width)


def initialize_parameters(module: nn.Module, negative_slope: float = 0.01):
    """
    Fan-in scaled uniform initialisation for convolution and linear weights, zeros for biases.
    """
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(sub.weight, a=negative_slope, nonlinearity='leaky_relu')
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
    return module


class PPSVAE(nn.Module):
    """
    Container for all learnable parameters. Encoder nets: h1 (independent location logits), h2 (autoregressive
    location logits) and h3 (abstract posterior). Generative nets: g1 (location prior logits), g2 (context-value
    head) and g3 (the ConvCNP target head).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.image_channels
        d = config.latent_dim
        self.h1 = ConvNet(c, 1, config)
        self.h2 = ConvNet(c + 1, 1, config)
        self.h3 = AbstractEncoder(config)
        self.g1 = ConvNet(d, 1, config)
        self.g2 = ConvNet(1 + d, 2 * c, config)
        self.g3 = ConvNet(1 + c, 2 * c, config)
        initialize_parameters(self, config.negative_slope)
        logger.debug('Built PPSVAE with %d parameters', sum(p.numel() for p in self.parameters()))

    @property
    def image_shape(self) -> tuple:
        return self.config.image_channels, self.config.height, self.config.width

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def check_image(self, y: torch.Tensor):
        if y.dim() != 4 or tuple(y.shape[1:]) != self.image_shape:
            raise ContractViolation(f'Expected images of shape B x {self.image_shape}, got {tuple(y.shape)}')
