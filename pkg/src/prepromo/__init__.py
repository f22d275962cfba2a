"""Delayed-conversion modeling for e-commerce sales pre-promotion windows.

A pre-trained same-day conversion / add-to-cart model is frozen and a
separate delay head is fine-tuned on historical pre-promotion logs, with
personalized gated transfer of the frozen hidden layers and a counterfactual
regularizer built from a doubly robust treatment-effect estimate of the
add-to-cart action.
"""

from .errors import ConfigError, DataError, PrepromoError, TrainingError, UsageError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "PrepromoError",
    "TrainingError",
    "UsageError",
    "__version__",
]
