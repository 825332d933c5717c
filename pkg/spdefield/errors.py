from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from spdefield.services.linalg import SolveReport


class SpdeFieldError(Exception):
    """Base error; `exit_code` is what the CLI returns for it."""

    exit_code = 1


class InvalidArgumentError(SpdeFieldError, ValueError):
    exit_code = 2


class ConfigError(SpdeFieldError):
    exit_code = 2


class SolverFailure(SpdeFieldError):
    exit_code = 3

    def __init__(self, message: str, report: SolveReport | None = None, level: int | None = None):
        self.report = report
        self.level = level
        if level is not None:
            message = f"level {level}: {message}"
        if report is not None:
            message = (
                f"{message} (iterations={report.iterations}, "
                f"abs_residual={report.abs_residual:.3e}, "
                f"rel_residual={report.rel_residual:.3e})"
            )
        super().__init__(message)

    def at_level(self, level: int) -> SolverFailure:
        if self.level is not None:
            return self
        return SolverFailure(str(self), report=None, level=level).with_report(self.report)

    def with_report(self, report: SolveReport | None) -> SolverFailure:
        self.report = report
        return self


class FactorizationError(SpdeFieldError):
    exit_code = 3


class NumericFailure(SpdeFieldError):
    exit_code = 3


class DenseGuardError(SpdeFieldError):
    exit_code = 2


class InsufficientSamplesError(SpdeFieldError):
    exit_code = 2


class AllocationDivergenceError(SpdeFieldError):
    exit_code = 3


class OutputError(SpdeFieldError):
    exit_code = 4
