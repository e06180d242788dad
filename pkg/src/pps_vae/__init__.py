from .command_line import *
from .data import Dataset, load_dataset, synth_shapes
from .generative_model import generate_unconditional, reconstruct
from .neural_blocks import PPSVAE, ModelConfig
from .train_config import TrainConfig
from .training import load_checkpoint, load_model, save_checkpoint, train


if __name__ == '__main__':
    command_line_main()
