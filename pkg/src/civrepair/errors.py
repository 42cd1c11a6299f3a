"""Exception hierarchy shared by every civrepair stage."""

from __future__ import annotations


class CivRepairError(Exception):
    """Base class for all errors raised by civrepair."""


class ParseError(CivRepairError, ValueError):
    """Malformed input document. Carries an optional 1-based position."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class ScenarioError(CivRepairError, ValueError):
    """A scenario document violates the scenario invariants."""


class ExecutionError(CivRepairError):
    """Diagnostic raised by the executor; never a crash of the simulated target."""


class PatchError(CivRepairError):
    """A patch cannot be applied to a scenario."""


class AnalysisError(CivRepairError):
    """Stack analysis could not produce a trusted-side patch site."""


class BackendError(CivRepairError):
    """Patch generation backend failed (transport, credential, or response format)."""
