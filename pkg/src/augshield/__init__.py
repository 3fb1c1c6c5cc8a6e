"""Data-poisoning attacks and augmentation defenses on a small numpy autodiff core."""

from . import attack, augment, autodiff, config, datagen, harness, model, trainer
from ._accel import HAVE_NUMBA

__version__ = "0.1.0"

__all__ = [
    "HAVE_NUMBA",
    "attack",
    "augment",
    "autodiff",
    "config",
    "datagen",
    "harness",
    "model",
    "trainer",
]
