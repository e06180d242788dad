import json
import os
import struct

import matplotlib.pyplot as plt
import numpy as np
import pytest
import torch

from pps_vae import _image_tools
from pps_vae.command_line import (EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, OUTPUT_ROOT_VARIABLE,
                                  command_line_main)
from pps_vae.objective import ElboBreakdown
from pps_vae.train_config import TrainConfig
from pps_vae.training import FORMAT_VERSION, file_sha256, load_checkpoint

TINY_RUN = TrainConfig(M=2, latent_dim=4, channels=8, blocks=1, batch_size=16, max_steps=6, log_every=2,
                       checkpoint_every=0, synth_n=64, synth_size=8, test_n=32, vae_latent_dim=4)


def _write_config(directory, config=TINY_RUN, extra=''):
    path = os.path.join(str(directory), 'run.cfg')
    with open(path, 'w') as config_file:
        config_file.write(config.to_text() + extra)
    return path


def _metrics_without_time(run_dir):
    with open(os.path.join(run_dir, 'metrics.jsonl')) as metrics_file:
        rows = [json.loads(line) for line in metrics_file]
    return [{key: value for key, value in row.items() if key != 'seconds'} for row in rows]


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    run_dir = str(root / 'run')
    assert command_line_main(['train', '--config', _write_config(root), '--out', run_dir, '--no-progress']) == EXIT_OK
    return run_dir


def test_train_writes_outputs(trained):
    for name in ('manifest.json', 'metrics.jsonl', 'final.ckpt'):
        assert os.path.isfile(os.path.join(trained, name))
    with open(os.path.join(trained, 'manifest.json')) as manifest_file:
        manifest = json.load(manifest_file)
    assert manifest['command'] == 'train'
    assert manifest['config'] == TINY_RUN.to_dict()
    assert manifest['finished_at'] is not None
    assert load_checkpoint(os.path.join(trained, 'final.ckpt')).step == 6


def test_training_runs_are_reproducible(trained, tmp_path):
    again = str(tmp_path / 'again')
    assert command_line_main(['train', '--config', _write_config(tmp_path), '--out', again, '--no-progress']) == 0
    assert _metrics_without_time(again) == _metrics_without_time(trained)


def test_config_errors(tmp_path, caplog):
    assert command_line_main(['train', '--config', str(tmp_path / 'absent.cfg'), '--out', str(tmp_path)]) \
        == EXIT_USAGE
    bad = _write_config(tmp_path, extra='bogus_key = 1\n')
    assert command_line_main(['train', '--config', bad, '--out', str(tmp_path / 'run')]) == EXIT_USAGE
    assert 'bogus_key' in caplog.text


def test_non_finite_training_exits(tmp_path, monkeypatch):
    def broken_loss(model, batch, M, temperature, generator, variant='autoregressive', hard=False,
                    return_breakdown=False):
        size = batch.shape[0]
        breakdown = ElboBreakdown.from_terms(torch.zeros(size), torch.zeros(size), torch.full((size,), float('inf')),
                                             torch.zeros(size))
        return -breakdown.elbo.mean(), breakdown

    monkeypatch.setattr('pps_vae.training.training_loss', broken_loss)
    run_dir = str(tmp_path / 'run')
    assert command_line_main(['train', '--config', _write_config(tmp_path), '--out', run_dir]) == EXIT_NUMERIC
    assert os.path.isfile(os.path.join(run_dir, 'last_good.ckpt'))


def test_sample(trained, tmp_path):
    ckpt = os.path.join(trained, 'final.ckpt')
    out = str(tmp_path / 'samples')
    assert command_line_main(['sample', '--ckpt', ckpt, '--n', '4', '--seed', '3', '--out', out]) == EXIT_OK
    assert sorted(name for name in os.listdir(out) if name.startswith('trace_')) == \
        [f'trace_{i:04d}.png' for i in range(4)]
    assert os.path.isfile(os.path.join(out, 'grid.png'))
    traces = np.load(os.path.join(out, 'traces.npz'))
    assert traces['image'].shape == (4, 1, 8, 8)
    assert np.array_equal(traces['image'], traces['context_values'] + traces['target_values'])
    for mask in traces['mask']:
        colours = {tuple(pixel) for pixel in _image_tools.mask_to_rgb(mask).reshape(-1, 3)}
        assert len(colours) <= 2
        assert 1 <= mask.sum() <= TINY_RUN.M
    with open(os.path.join(out, 'manifest.json')) as manifest_file:
        assert json.load(manifest_file)['checkpoint_sha256'] == file_sha256(ckpt)


def test_reconstruct(trained, tmp_path):
    out = str(tmp_path / 'reconstruct')
    assert command_line_main(['reconstruct', '--ckpt', os.path.join(trained, 'final.ckpt'), '--n', '3', '--out',
                              out]) == EXIT_OK
    figure = plt.imread(os.path.join(out, 'reconstruction.png'))
    assert figure.shape[:2] == (2 * 64 + 3 * 2, 3 * 64 + 4 * 2)
    arrays = np.load(os.path.join(out, 'reconstruction.npz'))
    assert len(arrays['centers']) == int(arrays['masks'].sum())
    assert np.array_equal(arrays['reconstructions'] * arrays['masks'], arrays['originals'] * arrays['masks'])


def test_estimate(trained, tmp_path, capsys):
    out = str(tmp_path / 'estimate')
    assert command_line_main(['estimate', '--ckpt', os.path.join(trained, 'final.ckpt'), '--K', '1',
                              '--n-images', '8', '--out', out]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(printed) == {'K', 'mean_log_marginal', 'n_images', 'seed'}
    assert printed['K'] == 1 and printed['n_images'] == 8
    with open(os.path.join(out, 'estimate.json')) as estimate_file:
        assert json.load(estimate_file) == printed


def test_default_output_root(trained, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_VARIABLE, str(tmp_path))
    assert command_line_main(['estimate', '--ckpt', os.path.join(trained, 'final.ckpt'), '--K', '1',
                              '--n-images', '4']) == EXIT_OK
    assert os.path.isfile(os.path.join(str(tmp_path), 'estimate', 'estimate.json'))


def test_unknown_dataset_override(trained, tmp_path):
    assert command_line_main(['estimate', '--ckpt', os.path.join(trained, 'final.ckpt'), '--dataset', 'mnist',
                              '--out', str(tmp_path)]) == EXIT_USAGE


def test_bad_checkpoints(trained, tmp_path):
    with open(os.path.join(trained, 'final.ckpt'), 'rb') as checkpoint_file:
        raw = checkpoint_file.read()
    bumped = str(tmp_path / 'bumped.ckpt')
    with open(bumped, 'wb') as checkpoint_file:
        checkpoint_file.write(raw[:8] + struct.pack('<I', FORMAT_VERSION + 1) + raw[12:])
    truncated = str(tmp_path / 'truncated.ckpt')
    with open(truncated, 'wb') as checkpoint_file:
        checkpoint_file.write(raw[:-100])
    for path in (bumped, truncated, str(tmp_path / 'absent.ckpt')):
        assert command_line_main(['sample', '--ckpt', path, '--n', '1', '--out', str(tmp_path / 'out')]) \
            == EXIT_CHECKPOINT


def test_probe(trained, tmp_path):
    out = str(tmp_path / 'probe')
    ckpt = os.path.join(trained, 'final.ckpt')
    assert command_line_main(['probe', '--ckpt', ckpt, '--features', 'yM-mode', '--probe-n', '30', '--out',
                              out]) == EXIT_OK
    with open(os.path.join(out, 'probe.json')) as probe_file:
        report = json.load(probe_file)
    assert report['feature_kind'] == 'yM-mode'
    assert report['seeds'] == [0, 1, 2]
    assert 0.0 <= report['f1_macro_mean'] <= 1.0
    assert command_line_main(['probe', '--ckpt', ckpt, '--features', 'yM-mode', '--seeds', '0', '1', '--out',
                              out]) == EXIT_USAGE
    assert command_line_main(['probe', '--ckpt', ckpt, '--features', 'vae-z', '--out', out]) == EXIT_USAGE


def test_compare_random(trained, tmp_path):
    out = str(tmp_path / 'compare')
    assert command_line_main(['compare-random', '--ckpt', os.path.join(trained, 'final.ckpt'), '--n-images', '10',
                              '--probe-n', '30', '--out', out]) == EXIT_OK
    with open(os.path.join(out, 'compare_random.json')) as report_file:
        report = json.load(report_file)
    assert report['imputation']['n_images'] == 10
    assert set(report['probe']) == {'yM-sample', 'random-yM', 'learned_wins'}


def test_vae_commands(tmp_path):
    run_dir = str(tmp_path / 'vae')
    assert command_line_main(['train-vae', '--config', _write_config(tmp_path), '--out', run_dir,
                              '--no-progress']) == EXIT_OK
    ckpt = os.path.join(run_dir, 'final.ckpt')
    assert load_checkpoint(ckpt).kind == 'vae'
    out = str(tmp_path / 'samples')
    assert command_line_main(['sample', '--ckpt', ckpt, '--n', '4', '--out', out]) == EXIT_OK
    assert os.path.isfile(os.path.join(out, 'grid.png'))
    assert not os.path.exists(os.path.join(out, 'traces.npz'))


def test_out_of_range_context_size_is_a_usage_error(trained, tmp_path, caplog):
    ckpt = os.path.join(trained, 'final.ckpt')
    for M in ('64', '0'):
        assert command_line_main(['sample', '--ckpt', ckpt, '--n', '1', '--M', M, '--out', str(tmp_path / M)]) \
            == EXIT_USAGE
    assert 'M must satisfy' in caplog.text


def test_context_commands_reject_vae_checkpoints(tmp_path):
    run_dir = str(tmp_path / 'vae')
    assert command_line_main(['train-vae', '--config', _write_config(tmp_path), '--out', run_dir,
                              '--no-progress']) == EXIT_OK
    ckpt = os.path.join(run_dir, 'final.ckpt')
    for features in ('yM-sample', 'yM-mode', 'abstract-a'):
        assert command_line_main(['probe', '--ckpt', ckpt, '--features', features, '--probe-n', '30', '--out',
                                  str(tmp_path / 'probe')]) == EXIT_USAGE
    assert command_line_main(['compare-random', '--ckpt', ckpt, '--n-images', '4', '--probe-n', '30', '--out',
                              str(tmp_path / 'compare')]) == EXIT_USAGE
    assert command_line_main(['probe', '--ckpt', ckpt, '--features', 'image', '--probe-n', '30', '--out',
                              str(tmp_path / 'image')]) == EXIT_OK
