"""Exception taxonomy shared by all perfowave modules."""

from __future__ import annotations


class PerfowaveError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PerfowaveError):
    """Invalid run configuration (incompatible spacings, bad sections, ...).

    May carry several messages at once so a config file is reported with
    every problem found, not just the first.
    """

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class ValidationError(PerfowaveError):
    """Inputs violate an operation's preconditions."""


class SolverError(PerfowaveError):
    """Iterative solver failed to converge."""

    def __init__(self, message, *, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class BlowUpError(PerfowaveError):
    """Trajectory left the finite range (NaN/Inf or magnitude guard)."""

    def __init__(self, message, *, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time
