import configparser
import dataclasses
import logging
import math
import os
import typing
from dataclasses import dataclass

from .errors import UsageError
from .inference_model import VARIANTS
from .neural_blocks import PADDING_MODES, ModelConfig

logger = logging.getLogger(__name__)

MODEL_KINDS = ['ppsvae', 'vae']
_TRUE_WORDS = {'true', 'yes', 'on', '1'}
_FALSE_WORDS = {'false', 'no', 'off', '0'}


@dataclass
class TrainConfig:
    """
    Settings for one training run. Defaults are the desk-scale reference run on 16 x 16 synthetic shapes; the
    full-scale settings use learning_rate 2e-4 with amsgrad, latent_dim 32 and 200 (autoregressive) or 400
    (independent) epochs.
    """
    variant: str = 'autoregressive'
    M: int = 8
    latent_dim: int = 16
    learning_rate: float = 2e-4
    amsgrad: bool = True
    epochs: int = 1
    batch_size: int = 64
    tau_start: float = 1.0
    tau_end: float = 0.5
    seed: int = 0
    dataset: str = 'synth_shapes'
    checkpoint_every: int = 500
    data_root: str = '.'
    max_steps: int = 2000
    log_every: int = 10
    weight_decay: float = 1e-4
    channels: int = 32
    blocks: int = 3
    kernel_size: int = 3
    padding_mode: str = 'zeros'
    normalize: bool = True
    synth_n: int = 4096
    synth_size: int = 16
    synth_classes: int = 3
    test_n: int = 512
    device: str = 'cpu'
    model: str = 'ppsvae'
    vae_latent_dim: int = 16
    hard_samples: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise UsageError(f'learning_rate must be positive, got {self.learning_rate}')
        if not self.tau_start >= self.tau_end > 0:
            raise UsageError(f'Need tau_start >= tau_end > 0, got {self.tau_start} and {self.tau_end}')
        if self.epochs < 1:
            raise UsageError(f'epochs must be at least 1, got {self.epochs}')
        if self.M < 1 or self.batch_size < 1 or self.latent_dim < 1 or self.vae_latent_dim < 1:
            raise UsageError('M, batch_size, latent_dim and vae_latent_dim must all be at least 1')
        if self.max_steps < 0 or self.log_every < 1 or self.checkpoint_every < 0:
            raise UsageError('max_steps and checkpoint_every must be >= 0 and log_every >= 1')
        if self.variant not in VARIANTS:
            raise UsageError(f'Unknown variant "{self.variant}"; choices are {VARIANTS}')
        if self.model not in MODEL_KINDS:
            raise UsageError(f'Unknown model "{self.model}"; choices are {MODEL_KINDS}')
        if self.padding_mode not in PADDING_MODES:
            raise UsageError(f'Unknown padding_mode "{self.padding_mode}"; choices are {PADDING_MODES}')

    @classmethod
    def load_from_dict(cls, dict_val: dict):
        """
        Builds a config from a mapping of key to value. String values are coerced to the field types, so the
        mapping may come straight from a parsed text file.
        :param dict_val: The mapping to load values from; unknown keys are rejected
        :return: A TrainConfig
        """
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw_value in dict_val.items():
            if key not in hints:
                error = UsageError(f'Unknown config key "{key}"')
                error.key = key
                raise error
            values[key] = _coerce(key, raw_value, hints[key])
        return cls(**values)

    @classmethod
    def load_from_file(cls, config_filepath: str):
        """
        Loads a config from a flat text file of "key = value" lines. Lines starting with # are comments.
        :param config_filepath: Path to the config file
        :return: A TrainConfig
        """
        if not os.path.isfile(config_filepath):
            raise UsageError(f'Config file "{config_filepath}" does not exist')
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#',), inline_comment_prefixes=('#',))
        parser.optionxform = str
        with open(config_filepath, 'r') as config_file:
            try:
                parser.read_string('[train]\n' + config_file.read(), source=config_filepath)
            except configparser.Error as error:
                raise UsageError(f'Could not parse config file "{config_filepath}": {error}') from error
        return cls.load_from_dict(dict(parser['train']))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return ''.join(f'{key} = {value}\n' for key, value in self.to_dict().items())

    def model_config(self, image_shape: tuple) -> ModelConfig:
        """
        Network settings for images of shape C x H x W.
        """
        c, h, w = image_shape
        return ModelConfig(image_channels=c, height=h, width=w, latent_dim=self.latent_dim,
                           hidden_channels=self.channels, blocks=self.blocks, kernel_size=self.kernel_size,
                           padding_mode=self.padding_mode, normalize=self.normalize)

    def dataset_kwargs(self) -> dict:
        return {'n': self.synth_n, 'size': self.synth_size, 'num_classes': self.synth_classes, 'seed': self.seed}

    def total_steps(self, num_images: int) -> int:
        if self.max_steps:
            return self.max_steps
        return self.epochs * math.ceil(num_images / self.batch_size)

    def temperature_at(self, step: int, total_steps: int) -> float:
        """
        Linear anneal from tau_start at step 0 to tau_end at the last step.
        """
        if total_steps <= 1:
            return self.tau_end
        fraction = min(step, total_steps - 1) / (total_steps - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * fraction


def _coerce(key, raw_value, target_type):
    if not isinstance(raw_value, str):
        if target_type is float and isinstance(raw_value, int) and not isinstance(raw_value, bool):
            return float(raw_value)
        return raw_value
    text = raw_value.strip()
    try:
        if target_type is bool:
            if text.lower() in _TRUE_WORDS:
                return True
            if text.lower() in _FALSE_WORDS:
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
    except ValueError:
        error = UsageError(f'Config key "{key}" expects a {target_type.__name__}, got "{text}"')
        error.key = key
        raise error from None
    return text
