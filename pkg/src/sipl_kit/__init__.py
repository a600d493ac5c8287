"""Privilege-guided all-in-one image restoration toolkit.

Trains a small encoder-decoder restorer in three regimes (no privilege,
decaying feature blending, learnable-dictionary proxy fusion), then refines
its own outputs at test time by feeding them back as pseudo-privileged
images. Includes the synthetic degradation corpus, metrics, cost accounting,
and the ablation/OOD experiment harness.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, ImageTooSmall, MissingGroundTruth,
                     NonFiniteGradient, NonFiniteLoss, ShapeError, ShapeMismatch,
                     SiplKitError, SpecNotHeldOut, UnknownKind)

__all__ = [
    "__version__",
    "SiplKitError", "ShapeMismatch", "ShapeError", "UnknownKind", "DataError",
    "MissingGroundTruth", "SpecNotHeldOut", "NonFiniteLoss", "NonFiniteGradient",
    "ImageTooSmall", "ConfigError",
]
