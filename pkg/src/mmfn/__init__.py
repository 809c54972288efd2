"""Tail decay-rate bounds for Markov-modulated fluid networks.

Modules: ``model`` (primitives and validation), ``traffic`` (traffic
equations and stability), ``spectral`` (Perron-Frobenius eigenstructure),
``geometry`` (domain fixed point and bounds), ``simulator`` (exact
event-driven paths and Monte-Carlo checks) and ``cli``.
"""
from .errors import (ConvergenceError, DirectionOutsideCorn, MmfnError, ModelStructureError,
                     ModelValidationError, NumericalError, PreconditionError)
from .model import MmfnModel, validate_model

__all__ = [
    "MmfnModel",
    "validate_model",
    "MmfnError",
    "ModelStructureError",
    "ModelValidationError",
    "ConvergenceError",
    "NumericalError",
    "PreconditionError",
    "DirectionOutsideCorn",
]
__version__ = "0.1.0"
