"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: file/format problems are
exit 3, data validation problems are exit 4.
"""


class CtxForestError(Exception):
    """Base class for all package errors."""


class FileFormatError(CtxForestError):
    """Malformed or unsupported on-disk artifact (header, model, manifest)."""


class ValidationError(CtxForestError):
    """Inputs violate a documented precondition or invariant."""
