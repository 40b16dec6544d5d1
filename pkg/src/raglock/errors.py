"""Exception hierarchy shared across the package.

ValidationError covers bad input data or configuration (CLI exit code 1);
BackendError covers embedder/judge failures (CLI exit code 2).
"""


class RaglockError(Exception):
    """Base class for all package errors."""


class ValidationError(RaglockError):
    """Input data, configuration, or precondition violation."""


class CorpusParseError(ValidationError):
    """Malformed corpus line; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ExpansionRejectedError(ValidationError):
    """Pool expansion vetoed by a leakage guard (exact-id collision)."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class BackendError(RaglockError):
    """Embedder or judge backend misbehaved."""


class TransportError(BackendError):
    """Network-level failure after exhausting retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class LabelParseError(BackendError):
    """Judge output carried no decodable 0/1 verdict."""


class BudgetExceededError(RaglockError):
    """A budget cap would be breached; the step concludes without the eval."""
