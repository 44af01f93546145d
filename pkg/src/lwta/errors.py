"""Exception types shared across the library.

Every failure the library can produce deliberately maps to one of these;
uncontrolled exceptions escaping public entry points are bugs.
"""


class LwtaError(Exception):
    """Base class for all library errors."""


class ShapeError(LwtaError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ParameterError(LwtaError):
    """A configuration value is outside its legal range."""


class DomainError(LwtaError):
    """A mathematical operation was applied outside its domain (e.g. log of
    a non-positive value)."""


class ContractError(LwtaError):
    """An API precondition was violated (non-scalar loss, label out of
    range, tape misuse)."""


class NonFiniteError(LwtaError):
    """An operation produced NaN or Inf; never returned silently."""


class DivergenceError(LwtaError):
    """Training produced a non-finite objective and was aborted."""


class DataFormatError(LwtaError):
    """A dataset file failed to parse. ``offset`` is the byte position at
    which the problem was detected, when known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ModelFormatError(LwtaError):
    """Base class for model-file parsing failures."""


class BadMagicError(ModelFormatError):
    """Model file does not start with the expected magic bytes."""


class VersionError(ModelFormatError):
    """Model file declares an unsupported format version."""


class ChecksumError(ModelFormatError):
    """Model file checksum does not match its contents."""


class TruncatedError(ModelFormatError):
    """Model file is shorter (or longer) than its headers declare."""


class ShapeMismatchError(ModelFormatError):
    """Declared layer shapes disagree with the stored weight blobs."""


class DescriptorError(ModelFormatError):
    """The architecture descriptor block is unreadable."""
