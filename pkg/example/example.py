"""
Minimal example of library usage: train a small PPS-VAE on synthetic shapes, then write samples and a
reconstruction figure next to this script.
"""

import os

import numpy as np

import pps_vae
from pps_vae import _image_tools

if __name__ == '__main__':
    example_directory = os.path.dirname(os.path.abspath(__file__))
    output_directory = os.path.join(example_directory, 'output')

    # A short run from the desk-scale config, capped at 200 steps
    config = pps_vae.TrainConfig.load_from_file(os.path.join(example_directory, 'desk_scale.cfg'))
    config = pps_vae.TrainConfig.load_from_dict({**config.to_dict(), 'max_steps': 200, 'synth_n': 1024})
    train_set = pps_vae.dataset_for(config, 'train')
    checkpoint, metrics = pps_vae.train(config, train_set, out_dir=output_directory, show_progress=True)
    print('\tELBO went from {:.2f} to {:.2f}'.format(metrics.rows[0]['elbo'], metrics.rows[-1]['elbo']))

    model = pps_vae.load_model(checkpoint)
    generator = pps_vae.seeded_generator(0)
    for i, trace in enumerate(pps_vae.generate_unconditional(model, 4, config.M, config.tau_end, generator)):
        panels = _image_tools.trace_panels(trace.mask[0].numpy(), trace.context_values[0].numpy(),
                                           trace.target_values[0].numpy(), trace.image[0].numpy())
        _image_tools.save_png(os.path.join(output_directory, f'sample_{i}.png'),
                              _image_tools.compose_grid(panels, columns=4))

    test_set = pps_vae.dataset_for(config, 'test')
    y = test_set.tensor(np.arange(6))
    trace = pps_vae.reconstruct(model, y, config.M, config.tau_end, generator, config.variant)
    canvas, _ = _image_tools.reconstruction_figure(y.numpy(), trace.image.numpy(), trace.mask.numpy())
    _image_tools.save_png(os.path.join(output_directory, 'reconstruction.png'), canvas)
    print('\tMean context size: {:.2f}'.format(float(trace.mask.sum(dim=(1, 2, 3)).mean())))
