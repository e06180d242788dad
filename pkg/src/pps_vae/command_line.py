import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys

import numpy as np
import torch

from . import _image_tools
from ._json_report import JSONReport
from .data import DATASET_ALIASES, DATASET_NAMES, Dataset, load_dataset, resolve_name
from .errors import (CheckpointIncompatibleError, CheckpointIntegrityError, ContractViolation, IngestionError,
                     NonFiniteLossError, UsageError)
from .evaluation import (CONTEXT_FEATURE_KINDS, FEATURE_KINDS, FeatureCache, compare_random, estimate_log_marginal,
                         probe_train_eval, require_context_model)
from .generative_model import GenerationTrace, generate_unconditional, reconstruct
from .train_config import TrainConfig
from .training import Checkpoint, file_sha256, load_checkpoint, load_model, train
from .vae_baseline import Vae, vae_generate, vae_reconstruct

logger = logging.getLogger(__name__)

OUTPUT_ROOT_VARIABLE = 'PPS_VAE_OUTPUT_ROOT'
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
DEFAULT_PROBE_SEEDS = [0, 1, 2]


@dataclasses.dataclass
class RunManifest:
    """
    Provenance of one command run, written to manifest.json in its output directory before any other output.
    """
    command: str
    config: dict
    seed: int
    inputs: dict
    output_dir: str
    started_at: str
    finished_at: str = None
    checkpoint_sha256: str = None

    def write(self) -> str:
        path = os.path.join(self.output_dir, 'manifest.json')
        JSONReport(dataclasses.asdict(self)).dump_to_file(path)
        return path

    def finish(self) -> str:
        self.finished_at = _now()
        return self.write()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def default_output_dir(command: str) -> str:
    return os.path.join(os.environ.get(OUTPUT_ROOT_VARIABLE, 'runs'), command)


def dataset_for(config: TrainConfig, split: str) -> Dataset:
    """
    Loads the dataset a config names. Synthetic shapes use synth_n training and test_n test images.
    """
    kwargs = {}
    if resolve_name(config.dataset, DATASET_NAMES, DATASET_ALIASES, kind='dataset') == 'synth_shapes':
        kwargs = config.dataset_kwargs()
        if split == 'test':
            kwargs['n'] = config.test_n
    return load_dataset(config.dataset, config.data_root, split, **kwargs)


def open_checkpoint(path: str, device='cpu') -> tuple:
    """
    Loads a checkpoint and rebuilds its model.
    :return: (Checkpoint, model, TrainConfig)
    """
    ckpt = load_checkpoint(path)
    config = ckpt.train_config
    return ckpt, load_model(ckpt, device), config


def seeded_generator(seed: int, device='cpu') -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(seed)
    return generator


def start_manifest(command: str, config: TrainConfig, seed: int, inputs: dict, out_dir: str,
                   checkpoint_path: str = None) -> RunManifest:
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(command=command, config=config.to_dict(), seed=seed, inputs=inputs,
                           output_dir=os.path.abspath(out_dir), started_at=_now(),
                           checkpoint_sha256=None if checkpoint_path is None else file_sha256(checkpoint_path))
    manifest.write()
    return manifest


def train_from_config(config_path: str, out_dir: str, model_kind: str = None, resume_path: str = None,
                      show_progress: bool = True, command: str = 'train') -> Checkpoint:
    """
    Trains a model from a config file, writing checkpoints, metrics.jsonl and a manifest under out_dir.
    :param config_path: Path to a "key = value" config file
    :param out_dir: Output directory
    :param model_kind: Overrides the config's model ('ppsvae' or 'vae')
    :param resume_path: Optional checkpoint of the same run to continue from
    :param show_progress: Whether to show a progress bar on a terminal
    :return: The final Checkpoint
    """
    config = TrainConfig.load_from_file(config_path)
    if model_kind is not None:
        config = dataclasses.replace(config, model=model_kind)
    resume_from = None if resume_path is None else load_checkpoint(resume_path)
    manifest = start_manifest(command, config, config.seed, {'config': os.path.abspath(config_path),
                                                             'resume': resume_path}, out_dir, resume_path)
    ds = dataset_for(config, 'train')
    final, _ = train(config, ds, out_dir=out_dir, show_progress=show_progress, resume_from=resume_from)
    manifest.finish()
    return final


def write_samples(ckpt_path: str, out_dir: str, n: int, M: int = None, seed: int = 0, temperature: float = None):
    """
    Writes n unconditional samples: per sample a four-panel trace PNG (mask, y_M, y_T, y), one grid PNG of the
    final images, and the raw traces in traces.npz.
    """
    ckpt, model, config = open_checkpoint(ckpt_path)
    M = config.M if M is None else M
    temperature = config.tau_end if temperature is None else temperature
    manifest = start_manifest('sample', config, seed, {'ckpt': os.path.abspath(ckpt_path), 'n': n, 'M': M}, out_dir,
                              ckpt_path)
    generator = seeded_generator(seed)
    if isinstance(model, Vae):
        images = vae_generate(model, n, generator).cpu().numpy()
    else:
        traces = generate_unconditional(model, n, M, temperature, generator)
        stacked = GenerationTrace.stack(traces)
        arrays = {name: tensor.cpu().numpy() for name, tensor in zip(
            ['a', 'mask', 'onehots', 'context_values', 'target_values', 'image'], stacked._fields())}
        np.savez(os.path.join(out_dir, 'traces.npz'), **arrays)
        for i in range(n):
            panels = _image_tools.trace_panels(arrays['mask'][i], arrays['context_values'][i],
                                               arrays['target_values'][i], arrays['image'][i])
            _image_tools.save_png(os.path.join(out_dir, f'trace_{i:04d}.png'),
                                  _image_tools.compose_grid(panels, columns=4))
        images = arrays['image']
    tiles = [_image_tools.upscale(_image_tools.to_rgb(image), 4) for image in images]
    _image_tools.save_png(os.path.join(out_dir, 'grid.png'),
                          _image_tools.compose_grid(tiles, columns=int(np.ceil(np.sqrt(n)))))
    manifest.finish()
    logger.info('Wrote %d samples to %s', n, out_dir)


def write_reconstructions(ckpt_path: str, out_dir: str, n: int, seed: int = 0, dataset: str = None,
                          data_root: str = None, split: str = 'test'):
    """
    Writes the two-row reconstruction figure (originals with circled context points over reconstructions) and the
    arrays behind it in reconstruction.npz.
    """
    ckpt, model, config = open_checkpoint(ckpt_path)
    config = _with_data_overrides(config, dataset, data_root)
    manifest = start_manifest('reconstruct', config, seed, {'ckpt': os.path.abspath(ckpt_path), 'n': n,
                                                            'split': split}, out_dir, ckpt_path)
    ds = dataset_for(config, split)
    y = ds.tensor(np.arange(min(n, len(ds))))
    if isinstance(model, Vae):
        masks = torch.zeros(y.shape[0], 1, *y.shape[-2:])
        reconstructions = vae_reconstruct(model, y)
    else:
        trace = reconstruct(model, y, config.M, config.tau_end, seeded_generator(seed), config.variant)
        masks, reconstructions = trace.mask, trace.image
    canvas, centers = _image_tools.reconstruction_figure(y.numpy(), reconstructions.cpu().numpy(),
                                                         masks.cpu().numpy())
    _image_tools.save_png(os.path.join(out_dir, 'reconstruction.png'), canvas)
    np.savez(os.path.join(out_dir, 'reconstruction.npz'), originals=y.numpy(),
             reconstructions=reconstructions.cpu().numpy(), masks=masks.cpu().numpy(),
             centers=np.array([[i, r, c] for i, points in enumerate(centers) for r, c in points],
                              dtype=np.int64).reshape(-1, 3))
    manifest.finish()


def _with_data_overrides(config: TrainConfig, dataset: str = None, data_root: str = None) -> TrainConfig:
    changes = {key: value for key, value in (('dataset', dataset), ('data_root', data_root)) if value is not None}
    return dataclasses.replace(config, **changes)


def write_estimate(ckpt_path: str, out_dir: str, K: int, seed: int = 0, n_images: int = None, dataset: str = None,
                   data_root: str = None) -> dict:
    """
    IWAE estimate of the mean test log-marginal, written to estimate.json and returned.
    """
    ckpt, model, config = open_checkpoint(ckpt_path)
    config = _with_data_overrides(config, dataset, data_root)
    manifest = start_manifest('estimate', config, seed, {'ckpt': os.path.abspath(ckpt_path), 'K': K}, out_dir,
                              ckpt_path)
    ds = dataset_for(config, 'test')
    result = estimate_log_marginal(model, ds, K, seed, config.M, config.tau_end, config.variant,
                                   n_images=n_images)
    JSONReport(result).dump_to_file(os.path.join(out_dir, 'estimate.json'))
    manifest.finish()
    return result


def _labelled_splits(config: TrainConfig):
    train_ds, test_ds = dataset_for(config, 'train'), dataset_for(config, 'test')
    if not train_ds.has_labels or not test_ds.has_labels:
        raise UsageError(f'Dataset "{config.dataset}" has no labels to probe')
    return train_ds, test_ds


def write_probe(ckpt_path: str, out_dir: str, feature_kind: str, seeds: list, probe_n: int = 2000,
                vae_ckpt_path: str = None, dataset: str = None, data_root: str = None) -> dict:
    """
    Trains probe classifiers on one kind of frozen feature and writes the ProbeReport to probe.json.
    """
    ckpt, model, config = open_checkpoint(ckpt_path)
    config = _with_data_overrides(config, dataset, data_root)
    feature_kind = resolve_name(feature_kind, FEATURE_KINDS, kind='feature kind')
    if feature_kind in CONTEXT_FEATURE_KINDS:
        require_context_model(model, f'{feature_kind} features')
    vae = None if vae_ckpt_path is None else open_checkpoint(vae_ckpt_path)[1]
    manifest = start_manifest('probe', config, seeds[0], {'ckpt': os.path.abspath(ckpt_path),
                                                          'features': feature_kind, 'seeds': seeds,
                                                          'vae_ckpt': vae_ckpt_path}, out_dir, ckpt_path)
    train_ds, test_ds = _labelled_splits(config)
    train_n, test_n = min(probe_n, len(train_ds)), min(probe_n, len(test_ds))
    cache = FeatureCache()
    features = {}
    for split, ds, count, seed in (('train', train_ds, train_n, seeds[0]), ('test', test_ds, test_n, seeds[0] + 1)):
        features[split] = cache.get_features(model, ds.tensor(np.arange(count)), feature_kind, config.M,
                                             config.tau_end, seed, config.variant, vae=vae, tag=f'{split}:{count}')
    report = probe_train_eval(features['train'], train_ds.labels[:train_n], seeds, features['test'],
                              test_ds.labels[:test_n], feature_kind=feature_kind)
    JSONReport(report.to_dict()).dump_to_file(os.path.join(out_dir, 'probe.json'))
    manifest.finish()
    return report.to_dict()


def write_comparison(ckpt_path: str, out_dir: str, seeds: list, n_images: int = 200, probe_n: int = 2000,
                     dataset: str = None, data_root: str = None) -> dict:
    """
    Learned versus random contexts on imputation and probe F1, written to compare_random.json.
    """
    ckpt, model, config = open_checkpoint(ckpt_path)
    config = _with_data_overrides(config, dataset, data_root)
    require_context_model(model, 'compare-random')
    manifest = start_manifest('compare-random', config, seeds[0], {'ckpt': os.path.abspath(ckpt_path),
                                                                   'seeds': seeds, 'n_images': n_images},
                              out_dir, ckpt_path)
    train_ds, test_ds = _labelled_splits(config)
    report = compare_random(model, train_ds, test_ds, config.M, config.tau_end, seeds, config.variant,
                            n_images=n_images, probe_n=probe_n)
    report.dump_to_file(os.path.join(out_dir, 'compare_random.json'))
    manifest.finish()
    return report.json


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pps_vae', description='Partial pixel specification VAE: training, '
                                                                 'generation and evaluation')
    parser.add_argument('-v', '--verbose', dest='verbose', action='store_true', default=False,
                        help='Log debugging information')
    commands = parser.add_subparsers(dest='command', required=True)

    def add(name, help_text, needs_ckpt=True):
        sub = commands.add_parser(name, help=help_text)
        if needs_ckpt:
            sub.add_argument('--ckpt', required=True, help='Checkpoint to load')
            sub.add_argument('--seed', type=int, default=0, help='Seed for every random draw')
            sub.add_argument('--dataset', default=None, help='Dataset override; defaults to the training dataset')
            sub.add_argument('--data-root', dest='data_root', default=None, help='Directory holding the dataset')
        sub.add_argument('--out', default=None,
                         help=f'Output directory; defaults to ${OUTPUT_ROOT_VARIABLE}/{name} (or runs/{name})')
        return sub

    for name, help_text in (('train', 'Train a PPS-VAE (or the model named in the config)'),
                            ('train-vae', 'Train the single-latent VAE baseline')):
        sub = add(name, help_text, needs_ckpt=False)
        sub.add_argument('--config', required=True, help='Config file of "key = value" lines')
        sub.add_argument('--resume', default=None, help='Checkpoint of this run to continue from')
        sub.add_argument('--no-progress', dest='progress', action='store_false', default=True)

    sub = add('sample', 'Draw unconditional samples and render their traces')
    sub.add_argument('--n', type=int, default=16)
    sub.add_argument('--M', dest='M', type=int, default=None, help='Location draws; defaults to the training M')
    sub.add_argument('--tau', type=float, default=None, help='Temperature; defaults to the final training value')

    sub = add('reconstruct', 'Render inferred context points and reconstructions')
    sub.add_argument('--n', type=int, default=8)
    sub.add_argument('--split', choices=['train', 'test'], default='test')

    sub = add('estimate', 'IWAE log-marginal on the test split')
    sub.add_argument('--K', dest='K', type=int, default=25)
    sub.add_argument('--n-images', dest='n_images', type=int, default=None)

    sub = add('probe', 'Probe classification on frozen features')
    sub.add_argument('--features', required=True, help=f'One of {", ".join(FEATURE_KINDS)}')
    sub.add_argument('--seeds', type=int, nargs='+', default=DEFAULT_PROBE_SEEDS)
    sub.add_argument('--probe-n', dest='probe_n', type=int, default=2000)
    sub.add_argument('--vae-ckpt', dest='vae_ckpt', default=None, help='VAE checkpoint for vae-z features')

    sub = add('compare-random', 'Learned versus random contexts')
    sub.add_argument('--seeds', type=int, nargs='+', default=DEFAULT_PROBE_SEEDS)
    sub.add_argument('--n-images', dest='n_images', type=int, default=200)
    sub.add_argument('--probe-n', dest='probe_n', type=int, default=2000)
    return parser


def _run(arguments) -> int:
    out_dir = arguments.out or default_output_dir(arguments.command)
    command = arguments.command
    if command in ('train', 'train-vae'):
        train_from_config(arguments.config, out_dir, 'vae' if command == 'train-vae' else None, arguments.resume,
                          arguments.progress, command)
    elif command == 'sample':
        write_samples(arguments.ckpt, out_dir, arguments.n, arguments.M, arguments.seed, arguments.tau)
    elif command == 'reconstruct':
        write_reconstructions(arguments.ckpt, out_dir, arguments.n, arguments.seed, arguments.dataset,
                              arguments.data_root, arguments.split)
    elif command == 'estimate':
        result = write_estimate(arguments.ckpt, out_dir, arguments.K, arguments.seed, arguments.n_images,
                                arguments.dataset, arguments.data_root)
        print(json.dumps(result))
    elif command == 'probe':
        write_probe(arguments.ckpt, out_dir, arguments.features, arguments.seeds, arguments.probe_n,
                    arguments.vae_ckpt, arguments.dataset, arguments.data_root)
    elif command == 'compare-random':
        write_comparison(arguments.ckpt, out_dir, arguments.seeds, arguments.n_images, arguments.probe_n,
                         arguments.dataset, arguments.data_root)
    return EXIT_OK


def command_line_main(argv: list = None) -> int:
    parser = _build_parser()
    arguments = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if arguments.verbose else logging.INFO, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return _run(arguments)
    except (UsageError, IngestionError, ContractViolation) as error:
        logger.error('%s', error)
        return EXIT_USAGE
    except NonFiniteLossError as error:
        logger.error('%s', error)
        return EXIT_NUMERIC
    except (CheckpointIncompatibleError, CheckpointIntegrityError) as error:
        logger.error('%s', error)
        return EXIT_CHECKPOINT


if __name__ == '__main__':
    sys.exit(command_line_main())
