"""Error hierarchy mapped to process exit codes.

Mirrors the downstream pipeline's convention: 2 usage, 3 io/format,
4 validation, 5 numerical.
"""


class PatchfeatError(Exception):
    exit_code = 1


class UsageError(PatchfeatError):
    exit_code = 2


class FormatError(PatchfeatError):
    exit_code = 3


class ValidationError(PatchfeatError):
    exit_code = 4


class NumericalError(PatchfeatError):
    exit_code = 5
