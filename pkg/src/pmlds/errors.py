"""Exception hierarchy.

Everything raised deliberately by this package derives from :class:`PmldsError`
so callers (and the CLI exit-code mapping) can tell our failures apart from
genuine bugs.
"""
from __future__ import annotations

__all__ = [
    "PmldsError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "DegenerateCloudError",
    "FixedPointError",
]


class PmldsError(Exception):
    """Base class for all errors raised by pmlds."""


class ConfigError(PmldsError, ValueError):
    """A configuration or parameter value violates its contract."""


class DataError(PmldsError, ValueError):
    """Input data is malformed or inconsistent with the configuration."""


class NumericalError(PmldsError, RuntimeError):
    """A numerical routine left the regime it can handle."""


class DegenerateCloudError(NumericalError):
    """Every particle weight underflowed to zero.

    Carries the step index and the offending raw log-weights so the failure can
    be diagnosed (typically an observation far outside the model's support).
    """

    def __init__(self, message: str, step: int | None = None, log_weights=None):
        super().__init__(message)
        self.step = step
        self.log_weights = log_weights


class FixedPointError(NumericalError):
    """An M-step fixed-point iteration failed to converge.

    ``last_iterate`` holds the parameters from the final sweep so a caller can
    inspect (or deliberately accept) them.
    """

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
