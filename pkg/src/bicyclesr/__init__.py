"""Unsupervised degradation-learning single-image super-resolution.

A self-contained CPU implementation: a tiny reverse-mode autodiff tensor
engine, the degradation/reconstruction/discriminator/feature networks, the
loss family binding them, an Adam trainer with the halving lr schedule,
classical resamplers and PSNR/SSIM evaluation, and a CLI.
"""

from . import classical, dataio, losses, models, nn, optim, tensor, trainer
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"
