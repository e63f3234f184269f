"""Guided-GAN feature enhancement on a numpy autodiff engine.

A generator maps mismatched acoustic features to features that a frozen,
pre-trained acoustic model classifies well; a discriminator keeps them close
to the clean-feature distribution.
"""

from .autodiff import Tensor, backward, grad, no_grad
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .losses import LossConfig

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad", "no_grad", "Checkpoint", "ExperimentConfig",
           "LossConfig", "__version__"]
