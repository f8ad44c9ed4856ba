"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataFormatError -> 2,
anything else escaping a subcommand -> 3.
"""


class BknnError(Exception):
    """Base class for all package errors."""


class UsageError(BknnError):
    """Bad command-line usage or inconsistent flag combination."""


class DataFormatError(BknnError):
    """Malformed or mismatched on-disk data: bad magic, failed checksum,
    truncation, config mismatch, unknown ids, invalid dataset rows."""


class InternalError(BknnError):
    """An internal invariant was violated; indicates a bug, not bad input."""
