"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "ConfigError",
    "SpikeFileError",
    "AccountingError",
    "DivergenceError",
    "PairingError",
    "SinkCollisionError",
]


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class SpikeFileError(ValueError):
    """A spike file failed header, payload, or label validation."""


class AccountingError(ValueError):
    """Privacy accounting entered an unusable regime or an unreachable target."""


class DivergenceError(RuntimeError):
    """Local training produced non-finite loss or parameters."""


class PairingError(ValueError):
    """Two run logs cannot be aligned for paired metrics."""


class SinkCollisionError(RuntimeError):
    """A run directory for the same spec already exists and force was not set."""
