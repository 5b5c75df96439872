"""Spectral simulation and small-noise analysis of a stochastic heat equation with memory."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: F401
    BlowUpError,
    ConfigurationError,
    ConsistencyError,
    ControlClassError,
    CoverageError,
    DomainError,
    IllPosedError,
    MemheatError,
)
