"""Desk-scale LoRA / PiSSA / BA-LoRA fine-tuning laboratory."""

from balora.errors import (
    BaloraError,
    CheckpointError,
    ConfigInvalid,
    DomainError,
    NoConvergence,
    NonFinite,
    NotDistribution,
    NotScalarLoss,
    RankTooLarge,
    ShapeMismatch,
    TooFewSamples,
    ZeroMatrix,
)

__version__ = "0.1.0"

__all__ = [
    "BaloraError",
    "CheckpointError",
    "ConfigInvalid",
    "DomainError",
    "NoConvergence",
    "NonFinite",
    "NotDistribution",
    "NotScalarLoss",
    "RankTooLarge",
    "ShapeMismatch",
    "TooFewSamples",
    "ZeroMatrix",
]
