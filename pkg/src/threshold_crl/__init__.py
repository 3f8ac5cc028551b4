"""Threshold natural policy gradient for constrained multi-client streaming scheduling."""
from __future__ import annotations

from .mdp import (HIGH, LOW, ActionClass, ClientModel, ClientState, CostParams, ModelError,
                  TransitionEntry, reference_model, tiny_model)

__version__ = "0.1.0"

__all__ = [
    "HIGH", "LOW", "ActionClass", "ClientModel", "ClientState", "CostParams", "ModelError",
    "TransitionEntry", "reference_model", "tiny_model", "__version__",
]
