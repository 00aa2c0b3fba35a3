"""Exception hierarchy shared across the package.

The CLI maps every subclass of EmbAlignError (and ValueError) to exit
status 2, and OSError to exit status 1.
"""


class EmbAlignError(Exception):
    """Base class for validation and data errors raised by this package."""


class FileFormatError(EmbAlignError):
    """A file does not conform to the expected binary or CSV layout."""


class TruncationError(FileFormatError):
    """Declared dimension or record count disagrees with the payload."""


class CorruptMapError(FileFormatError):
    """A map file whose matrix violates the invariants of its kind."""


class DataError(EmbAlignError):
    """Invalid values: non-finite entries, duplicate ids, broken invariants."""


class ConsistencyError(DataError):
    """Manifest records that contradict each other."""


class UnknownIdError(EmbAlignError):
    """An id that cannot be resolved against the relevant collection."""


class AlignmentError(EmbAlignError):
    """Two embedding sets share no media ids."""


class DimensionError(EmbAlignError):
    """Operands with incompatible dimensions."""


class ProtocolError(EmbAlignError):
    """Experiment preconditions violated: overlapping splits, missing
    impostor pairs, probe subjects absent from the gallery."""
