"""Exception hierarchy shared by the estimator, simulation harness and CLI."""

from __future__ import annotations


class UqeError(Exception):
    """Base class for every error raised by :mod:`uqe2s`."""

    #: pipeline step (1-6) or a short stage name, filled in by the orchestrator
    step: str | None = None


class ValidationError(UqeError, ValueError):
    """Bad input data or configuration (CLI exit code 2)."""


class NumericalError(UqeError, RuntimeError):
    """A numerical procedure failed (CLI exit code 3)."""


class ConvergenceError(NumericalError):
    pass


class SeparationError(NumericalError):
    pass


class OverlapError(NumericalError):
    """A fitted probability left the admissible band (eps, 1 - eps)."""


class IdentificationError(NumericalError):
    """Rank/order condition failure for the outcome model."""
