"""Exception types shared across the package.

Most errors subclass ValueError so callers can catch them generically;
the CLI maps each family to a distinct exit code.
"""


class DifsError(Exception):
    """Base class for all package-specific errors."""


class FormatError(DifsError, ValueError):
    """A payload or file does not match a documented format."""


class DomainError(DifsError, ValueError):
    """An argument violates a documented precondition or invariant."""


class ShapeError(DomainError):
    """Array dimensions are incompatible with the operation."""


class VocabularyError(DomainError):
    """A token or label is outside its closed vocabulary."""


class ParseError(FormatError):
    """A manifest or report line could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ValidationError(DifsError, ValueError):
    """A parsed record breaches a type invariant; names the offending field."""

    def __init__(self, message, field=None, line_no=None):
        if field is not None:
            message = f"field {field!r}: {message}"
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.field = field
        self.line_no = line_no


class InputError(DifsError, ValueError):
    """An assembly request references data the sample does not carry."""


class ContractError(DifsError, RuntimeError):
    """A cross-module contract was violated (e.g. unfrozen model where a frozen one is required)."""


class DependencyError(DifsError, RuntimeError):
    """A required prerequisite artifact (checkpoint, corpus) is missing."""


class TransportError(DifsError, RuntimeError):
    """A remote endpoint stayed unreachable or unusable after retries."""


class UsageError(DifsError, ValueError):
    """Bad command-line usage not caught by the argument parser."""
