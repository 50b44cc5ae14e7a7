"""
Exception types for iscapbeam.
Every failure the library reports on purpose derives from IscapError.
"""

from typing import Any, List, Optional


class IscapError(Exception):
    """Base class for all iscapbeam errors."""


class ConfigError(IscapError, ValueError):
    """Unreadable or invalid experiment file."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ''
        if path:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class InvalidConfigError(IscapError, ValueError):
    """A physical or dimensional parameter violates its invariant."""


class NormalizationError(IscapError, ValueError):
    """A normalized metric was requested with a zero scaling coefficient."""


class PreconditionError(IscapError, ValueError):
    """An operation was called on data that does not meet its precondition."""


class DegenerateChannelError(IscapError):
    """The IR channel matrix does not have full column rank."""


class DegenerateNullSpaceError(DegenerateChannelError):
    """Zero forcing needs K_IR < N_t to leave a null space."""


class RequirementsInfeasibleError(IscapError):
    """The rate / harvested-power requirements cannot be met."""


class SolverFailureError(IscapError):
    """The conic backend could certify neither optimality nor infeasibility."""

    def __init__(self, message: str, result: Any = None, trace: Any = None):
        super().__init__(message)
        self.result = result
        self.trace = trace


class EstimationDegenerateError(IscapError):
    """Sensing estimation could not produce the requested number of estimates."""

    def __init__(self, message: str, partial: Optional[List[Any]] = None):
        super().__init__(message)
        self.partial = list(partial) if partial is not None else []


class EquivalenceViolationError(IscapError):
    """A rank-one extraction failed one of its equivalence checks."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report
