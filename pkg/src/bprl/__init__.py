"""Backdoor purification robustness: superficial safety probes and path-aware fine-tuning
on small dense networks."""

from .errors import InvalidInputError, TrainingDivergedError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "TrainingDivergedError", "__version__"]
