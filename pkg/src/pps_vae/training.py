"""
The optimisation loop shared by the PPS-VAE and the VAE baseline, its checkpoint file format and the metrics log.

A checkpoint file is an 8-byte magic, a little-endian uint32 format version, a uint64 payload length, the sha256
of the payload and then the payload itself (a torch.save archive of plain tensors, dicts and numbers).
"""
import copy
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np
import torch
from tqdm import tqdm

from .data import Dataset, batch_indices
from .errors import CheckpointIncompatibleError, CheckpointIntegrityError, NonFiniteLossError, UsageError
from .neural_blocks import PPSVAE, ModelConfig
from .objective import training_loss
from .train_config import TrainConfig
from .vae_baseline import Vae, vae_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'PPSVAE\x00\x01'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<8sIQ32s')

METRIC_KEYS = ['step', 'elbo', 'target_ll', 'kl_a', 'context_ll', 'location_ratio', 'grad_norm', 'tau', 'seconds']
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class Checkpoint:
    """
    Everything needed to rebuild a model and continue its training run bit for bit.
    """
    model_state: dict
    optimizer_state: dict
    step: int
    config: dict
    model_config: dict
    generator_state: torch.Tensor
    kind: str = 'ppsvae'
    format_version: int = FORMAT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.load_from_dict(self.config)

    def to_payload(self) -> dict:
        return dataclasses.asdict(self)


def _payload_bytes(ckpt: Checkpoint) -> bytes:
    buffer = io.BytesIO()
    torch.save(ckpt.to_payload(), buffer)
    return buffer.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """
    Writes a checkpoint atomically: the file appears complete under its final name or not at all.
    :return: The path written
    """
    payload = _payload_bytes(ckpt)
    header = _HEADER.pack(CHECKPOINT_MAGIC, ckpt.format_version, len(payload), hashlib.sha256(payload).digest())
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_path = path + '.tmp'
    with open(temp_path, 'wb') as output_file:
        output_file.write(header)
        output_file.write(payload)
        output_file.flush()
        os.fsync(output_file.fileno())
    os.replace(temp_path, path)
    logger.debug('Saved checkpoint at step %d to %s', ckpt.step, path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Reads and verifies a checkpoint file.
    :raises CheckpointIncompatibleError: The file is not a checkpoint or has an unsupported version
    :raises CheckpointIntegrityError: The file is truncated or its payload is corrupt
    """
    if not os.path.isfile(path):
        raise CheckpointIntegrityError(f'Checkpoint "{path}" does not exist')
    with open(path, 'rb') as input_file:
        raw = input_file.read()

    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointIncompatibleError(f'"{path}" is not a checkpoint file (bad magic bytes)')
    if len(raw) < _HEADER.size:
        raise CheckpointIntegrityError(f'Checkpoint "{path}" is truncated inside its header')
    _, version, length, digest = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointIncompatibleError(f'Checkpoint "{path}" has format version {version}; '
                                          f'this build reads version {FORMAT_VERSION}')
    payload = raw[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointIntegrityError(f'Checkpoint "{path}" holds {len(payload)} payload bytes, expected {length}')
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointIntegrityError(f'Checkpoint "{path}" failed its sha256 check')

    try:
        contents = torch.load(io.BytesIO(payload), map_location='cpu', weights_only=True)
        return Checkpoint(**contents)
    except Exception as error:
        raise CheckpointIntegrityError(f'Checkpoint "{path}" payload could not be decoded: {error}') from error


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as input_file:
        for chunk in iter(lambda: input_file.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class MetricsLog:
    """
    Append-only record of training metrics, one row per log step. With a path, every row is also appended to a
    JSON-lines file as soon as it is recorded.
    """

    def __init__(self, path: str = None, append: bool = False):
        self.path = path
        self.rows = []
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            if not append and os.path.exists(path):
                os.remove(path)

    def __len__(self):
        return len(self.rows)

    def append(self, row: dict):
        if sorted(row.keys()) != sorted(METRIC_KEYS):
            raise ValueError(f'Metrics rows need exactly the keys {METRIC_KEYS}, got {sorted(row.keys())}')
        row = {key: row[key] for key in METRIC_KEYS}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, 'a') as output_file:
                output_file.write(json.dumps(row) + '\n')

    def column(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.rows], dtype=np.float64)

    def smoothed(self, key: str, window: int) -> np.ndarray:
        """
        Trailing moving average of one column over windows of `window` rows; shorter logs give a single mean.
        """
        values = self.column(key)
        if len(values) == 0:
            return values
        window = max(1, min(window, len(values)))
        return np.convolve(values, np.ones(window) / window, mode='valid')

    @classmethod
    def load(cls, path: str):
        log = cls()
        with open(path, 'r') as input_file:
            for line in input_file:
                if line.strip():
                    log.append(json.loads(line))
        log.path = path
        return log


def build_model(kind: str, model_config: ModelConfig) -> torch.nn.Module:
    if kind == 'vae':
        return Vae(model_config)
    if kind == 'ppsvae':
        return PPSVAE(model_config)
    raise UsageError(f'Unknown model kind "{kind}"')


def _model_config_for(config: TrainConfig, image_shape: tuple) -> ModelConfig:
    model_config = config.model_config(image_shape)
    if config.model == 'vae':
        model_config = dataclasses.replace(model_config, latent_dim=config.vae_latent_dim)
    return model_config


def load_model(ckpt: Checkpoint, device='cpu') -> torch.nn.Module:
    """
    Rebuilds the model stored in a checkpoint, in evaluation mode.
    """
    model = build_model(ckpt.kind, ModelConfig(**ckpt.model_config))
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as error:
        raise CheckpointIncompatibleError(f'Checkpoint parameters do not fit the stored architecture: {error}')
    return model.to(device).eval()


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS,
                             weight_decay=config.weight_decay, amsgrad=config.amsgrad)


def _batch_terms(model, config: TrainConfig, y: torch.Tensor, tau: float, generator: torch.Generator):
    if config.model == 'vae':
        loss, terms = vae_loss(model, y, generator)
        means = terms.mean()
        row = {'elbo': means['elbo'], 'target_ll': means['reconstruction'], 'kl_a': means['kl'],
               'context_ll': 0.0, 'location_ratio': 0.0}
    else:
        loss, terms = training_loss(model, y, config.M, tau, generator, variant=config.variant,
                                    hard=config.hard_samples, return_breakdown=True)
        row = terms.mean()
    return loss, row, terms.first_nonfinite_term()


def _snapshot(model, optimizer, step, config, model_config, generator) -> Checkpoint:
    return Checkpoint(
        model_state={key: value.detach().cpu().clone() for key, value in model.state_dict().items()},
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        step=step,
        config=config.to_dict(),
        model_config=model_config.to_dict(),
        generator_state=generator.get_state().clone(),
        kind=config.model,
    )


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, 'checkpoints', f'step_{step:07d}.ckpt')


def train(config: TrainConfig, ds: Dataset, out_dir: str = None, show_progress: bool = False,
          resume_from: Checkpoint = None):
    """
    Trains a model by maximising its ELBO with AdamW (decoupled weight decay, optional amsgrad), annealing the
    Gumbel-Softmax temperature linearly over the run.

    The batch order, temperature and noise at every step depend only on the seed and the step index, so a run
    resumed from a checkpoint reproduces the uninterrupted run exactly.
    :param config: The TrainConfig
    :param ds: The training Dataset
    :param out_dir: Directory for checkpoints/, metrics.jsonl and final.ckpt; nothing is written when None
    :param show_progress: Whether to show a tqdm progress bar
    :param resume_from: A Checkpoint of this run to continue from
    :return: A tuple of the final Checkpoint and the MetricsLog
    """
    device = torch.device(config.device)
    model_config = _model_config_for(config, ds.image_shape)
    if resume_from is not None and resume_from.model_config != model_config.to_dict():
        raise CheckpointIncompatibleError('The checkpoint was written for a different architecture or dataset')

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = build_model(config.model, model_config).to(device)
    model.train()
    optimizer = make_optimizer(model, config)
    generator = torch.Generator(device=device)
    generator.manual_seed(config.seed)

    step = 0
    if resume_from is not None:
        model.load_state_dict(resume_from.model_state)
        optimizer.load_state_dict(resume_from.optimizer_state)
        generator.set_state(resume_from.generator_state)
        step = resume_from.step
        logger.info('Resuming %s training at step %d', config.model, step)

    total_steps = config.total_steps(len(ds))
    steps_per_epoch = math.ceil(len(ds) / config.batch_size)
    metrics = MetricsLog(None if out_dir is None else os.path.join(out_dir, 'metrics.jsonl'),
                         append=resume_from is not None)
    last_good_path = None
    start_time = time.perf_counter()
    logger.info('Training %s (%s) for %d steps on %d images of shape %s', config.model, config.variant,
                total_steps, len(ds), ds.image_shape)

    progress = tqdm(total=total_steps, initial=step, disable=not (show_progress and sys.stderr.isatty()),
                    desc='train', unit='step')
    batches, batches_epoch = None, None
    while step < total_steps:
        epoch, offset = divmod(step, steps_per_epoch)
        if batches_epoch != epoch:
            batches, batches_epoch = batch_indices(len(ds), config.batch_size, config.seed + epoch), epoch
        y = ds.tensor(batches[offset], dtype=torch.float32, device=device)
        tau = config.temperature_at(step, total_steps)

        optimizer.zero_grad(set_to_none=True)
        loss, row, bad_term = _batch_terms(model, config, y, tau, generator)
        if bad_term is None and not bool(torch.isfinite(loss)):
            bad_term = 'elbo'
        if bad_term is None:
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), float('inf')))
            if not math.isfinite(grad_norm):
                bad_term = 'grad_norm'
        if bad_term is not None:
            if out_dir is not None:
                optimizer.zero_grad(set_to_none=True)
                last_good_path = save_checkpoint(_snapshot(model, optimizer, step, config, model_config, generator),
                                                 os.path.join(out_dir, 'last_good.ckpt'))
            progress.close()
            logger.error('Non-finite %s at step %d', bad_term, step)
            raise NonFiniteLossError(bad_term, step, last_good_path)

        optimizer.step()
        step += 1
        progress.update(1)

        if step % config.log_every == 0 or step == total_steps:
            row.update(step=step, grad_norm=grad_norm, tau=tau, seconds=time.perf_counter() - start_time)
            metrics.append(row)
            progress.set_postfix(elbo=f'{row["elbo"]:.2f}')
            logger.debug('step %d: elbo %.3f, grad norm %.3f, tau %.3f', step, row['elbo'], grad_norm, tau)
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good_path = save_checkpoint(_snapshot(model, optimizer, step, config, model_config, generator),
                                             checkpoint_path(out_dir, step))
    progress.close()

    final = _snapshot(model, optimizer, step, config, model_config, generator)
    if out_dir is not None:
        save_checkpoint(final, os.path.join(out_dir, 'final.ckpt'))
    if len(metrics):
        logger.info('Finished at step %d with elbo %.3f', step, metrics.rows[-1]['elbo'])
    return final, metrics


def resume(ckpt: Checkpoint, ds: Dataset, out_dir: str = None, show_progress: bool = False):
    """
    Continues the run a checkpoint was taken from, under its stored config, to the end of its schedule.
    """
    return train(ckpt.train_config, ds, out_dir=out_dir, show_progress=show_progress, resume_from=ckpt)
