"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "FredaError",
    "ConfigError",
    "FactorizationError",
    "ZeroVarianceError",
    "ProtocolError",
]


class FredaError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FredaError):
    """Invalid run configuration; ``field`` is the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FactorizationError(FredaError):
    """A positive-definite factorization failed even after jitter retries."""


class ZeroVarianceError(FredaError):
    """Standardization hit zero-variance columns; ``columns`` lists them."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"zero-variance columns: {self.columns}")


class ProtocolError(FredaError):
    """A protocol phase failed; ``phase`` names where."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase
