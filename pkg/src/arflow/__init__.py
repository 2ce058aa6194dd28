"""Desk-scale autoregressive normalizing flows.

A from-scratch reverse-mode autodiff engine drives a deep-shallow stack of
transformer autoregressive flow blocks with exact likelihoods, closed-form
Gaussian guidance, a noisy-latent toy pipeline, and Metropolis-Hastings
inpainting.  The CLI exposes training, sampling, likelihood evaluation, and
verification experiments; report paths write CSVs plus rendered figures.
"""

__version__ = "0.1.0"

from . import tensor
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DomainError,
    NonFiniteError,
    ShapeError,
)
from .tensor import Tensor, backward, no_grad

__all__ = [
    "tensor",
    "Tensor",
    "backward",
    "no_grad",
    "ShapeError",
    "DomainError",
    "ConfigError",
    "DatasetError",
    "CheckpointError",
    "NonFiniteError",
    "__version__",
]
