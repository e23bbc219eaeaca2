"""Exception taxonomy shared by every seqkv module.

Container parse failures carry the byte offset of the violation so the CLI
can report "file:offset" on exit code 2.
"""


class SeqkvError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SeqkvError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(SeqkvError):
    """A parameter value is outside its documented domain."""


class NumericError(SeqkvError):
    """Non-finite input, or an iterative routine failed to converge."""

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class DegenerateRowError(SeqkvError):
    """One or more rows have (near-)zero norm where a direction is required."""

    def __init__(self, message: str, rows: tuple[int, ...] = ()):
        super().__init__(message)
        self.rows = rows


class ConfigurationError(SeqkvError):
    """Cache, codec and decode-path settings do not fit together."""


class ValidationError(SeqkvError):
    """A deserialized artifact violates its structural contract."""


class TrainingError(SeqkvError):
    """Codec training diverged or was given an unusable sample set."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class UnsupportedPathError(SeqkvError):
    """The requested decode path cannot run with the given codec kind."""


class KvdParseError(SeqkvError):
    """Base class for malformed KVD1/KVC1 container data."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class KvdMagicError(KvdParseError):
    """Container does not start with the expected magic bytes."""


class KvdVersionError(KvdParseError):
    """Container version is not supported."""


class KvdTruncatedError(KvdParseError):
    """Container ends before a declared field or payload is complete."""


class KvdDuplicateNameError(KvdParseError):
    """Two entries share the same name."""


class KvdDtypeError(KvdParseError):
    """Entry declares a dtype code other than f32."""


class KvdNameError(KvdParseError):
    """Entry name bytes are not valid UTF-8."""


class KvdShapeError(KvdParseError):
    """Entry declares an unrepresentable shape."""


class KvdTrailingDataError(KvdParseError):
    """Bytes remain after the last declared entry."""
