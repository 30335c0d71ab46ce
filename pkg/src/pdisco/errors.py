"""Exception types raised across the package."""


class PdiscoError(Exception):
    """Base class for all package errors."""


class ConfigError(PdiscoError, ValueError):
    """Inconsistent shapes, dimensions or configuration values."""


class NumericError(PdiscoError, ArithmeticError):
    """A tensor or loss term became non-finite."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class InputError(PdiscoError, ValueError):
    """Bad user-supplied values (labels out of range, mismatched lengths)."""


class FormatError(PdiscoError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
        self.path = path
        self.offset = offset


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ValidationError(PdiscoError, ValueError):
    """An annotated sample violates a dataset invariant."""

    def __init__(self, message, sample_id=None):
        if sample_id is not None:
            message = f"sample {sample_id}: {message}"
        super().__init__(message)
        self.sample_id = sample_id
