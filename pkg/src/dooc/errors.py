"""Exception hierarchy for dooc.

Every error carries the CLI exit code that reports it.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from dooc.controller import ValidationReport


class DOOCError(Exception):
    """Base exception for dooc errors."""

    exit_code = 1

    def __init__(self, message: str, exit_code: int | None = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class ScenarioValidationError(DOOCError):
    """Raised when a scenario or one of its sub-configs fails validation."""

    exit_code = 2


class GraphError(ScenarioValidationError):
    """Raised for malformed digraphs or graphs that are not strongly connected."""


class InternalModelError(ScenarioValidationError):
    """Raised when Φ, (M, N) or the Sylvester solution violate their invariants."""


class GainValidationError(ScenarioValidationError):
    """Raised when controller/observer gains fail the Hurwitz or positivity checks."""

    def __init__(self, report: ValidationReport):
        failed = ", ".join(check.name for check in report.checks if not check.passed)
        super().__init__(f"Gain validation failed: {failed}")
        self.report = report

    def __reduce__(self):
        return (self.__class__, (self.report,))


class NotApplicableError(DOOCError):
    """Raised when an operation is requested for a plant family it does not cover."""

    exit_code = 2


class DivergenceError(DOOCError):
    """Raised when the integrated state or its derivative stops being finite."""

    exit_code = 3

    def __init__(self, message: str, time: float | None = None, block: str | None = None):
        where = []
        if time is not None:
            where.append(f"t={time:.6g}")
        if block is not None:
            where.append(f"block={block}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.reason = message
        self.time = time
        self.block = block

    def __reduce__(self):
        return (self.__class__, (self.reason, self.time, self.block))


class DegenerateStateError(DivergenceError):
    """Raised when a coordinator diagonal entry ξ_i^i is not positive."""


class AcceptanceError(DOOCError):
    """Raised when at least one acceptance criterion fails."""

    exit_code = 4
