"""Measurement-rate planning and scheduling for continuous-discrete Kalman filters with auxiliary dynamics."""
from __future__ import annotations

from .model import (
    AuxModel,
    GaussianBelief,
    ModelError,
    ProcessModel,
    RatePlan,
    Schedule,
    Sensor,
    TimeGrid,
    validate_model,
)

__version__ = "0.1.0"

__all__ = [
    "AuxModel",
    "GaussianBelief",
    "ModelError",
    "ProcessModel",
    "RatePlan",
    "Schedule",
    "Sensor",
    "TimeGrid",
    "validate_model",
]
