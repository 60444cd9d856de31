"""Inpainting with a U-Net whose decoder borrows encoder features from the
best-matching known positions, trained adversarially on a small numpy
autodiff tape."""

from .autodiff import Parameter, Tensor, adam_step, backward, no_grad
from .config import RunConfig, load_run_config
from .losses import LossReport, LossWeights
from .masks import MaskPyramid, propagate_mask
from .networks import (Discriminator, Generator, GeneratorConfig,
                       build_discriminator, build_generator)
from .shift import (ShiftAssignment, apply_shift, apply_shift_array,
                    nn_search, nn_search_as_correlation, shift_backward)
from .training import (Sample, TrainConfig, make_central_mask,
                       make_random_mask, prepare_input, train, train_step)

__version__ = "0.1.0"
