"""Exception taxonomy shared across the package.

Configuration problems (bad input, mismatched shapes) are distinct from
runtime solver failures so that the CLI can map them to different exit
codes: validation errors exit with 2, convergence failures with 3.
"""

from __future__ import annotations

__all__ = [
    "MicromechError",
    "ConfigurationError",
    "ParameterError",
    "InadmissibleStateError",
    "ConvergenceError",
    "DivergenceError",
    "SnapshotError",
]


class MicromechError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(MicromechError):
    """Invalid configuration: bad values, unknown keys, shape mismatches.

    ``errors`` optionally carries a list of individual messages (the config
    parser collects everything it finds rather than stopping at the first).
    """

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors) if errors else [message]


class ParameterError(ConfigurationError):
    """A numeric parameter is out of its admissible range (e.g. rho <= 0)."""


class InadmissibleStateError(MicromechError):
    """A state field violates an admissibility constraint (det F <= 0, ...)."""


class ConvergenceError(MicromechError):
    """An iteration hit its cap without meeting tolerances.

    Carries the residual history so callers can report or dump it.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history else []


class DivergenceError(ConvergenceError):
    """Residuals grew past the divergence guard; message names the last
    good checkpoint if the driver wrote one."""


class SnapshotError(MicromechError):
    """Snapshot/checkpoint file is malformed or has an unsupported version.

    ``offset`` is the byte offset at which reading failed, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
