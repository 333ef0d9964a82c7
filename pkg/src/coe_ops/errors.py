"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code so operators can tell a bad config
apart from bad data or a flaky endpoint.
"""

from __future__ import annotations


class CoeOpsError(Exception):
    exit_code = 1


class ConfigurationError(CoeOpsError):
    exit_code = 2


class IntegrityError(CoeOpsError):
    """Data does not satisfy a structural invariant (duplicate ids, unknown ids...)."""

    exit_code = 3


class SchemaError(IntegrityError):
    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class RowError(IntegrityError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class CoverageError(IntegrityError):
    def __init__(self, message: str, missing: list[tuple[str, str]]):
        super().__init__(message)
        self.missing = missing


class CheckpointError(IntegrityError):
    def __init__(self, message: str, line: int):
        super().__init__(f"checkpoint line {line}: {message}")
        self.line = line


class TransportError(CoeOpsError):
    exit_code = 4

    def __init__(self, message: str, *, retryable: bool = True, attempts: int = 0):
        super().__init__(message)
        self.retryable = retryable
        self.attempts = attempts


class ContentFilterError(TransportError):
    """The provider refused the prompt. Retrying the same text will not help."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message, retryable=False, attempts=attempts)
