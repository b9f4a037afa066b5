"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI maps it to:
2 usage, 3 io/format, 4 validation, 5 numerical failure.
"""


class HistoexprError(Exception):
    exit_code = 1


class UsageError(HistoexprError):
    exit_code = 2


class FormatError(HistoexprError):
    """Unreadable, corrupt, or hash-mismatched on-disk artifact."""

    exit_code = 3


class ValidationError(HistoexprError):
    """Structurally valid input that violates an operation's contract."""

    exit_code = 4


class ShapeError(ValidationError):
    exit_code = 4


class NumericalError(HistoexprError):
    """Non-finite values or a diverging computation."""

    exit_code = 5
