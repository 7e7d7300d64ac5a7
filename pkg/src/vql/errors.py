"""Exception hierarchy.

Every error carries an integer ``code`` so the command line front end can map
failures to distinct exit statuses.
"""


class VQLError(Exception):
    code = 1


class ShapeError(VQLError, ValueError):
    code = 10


class ParameterError(VQLError, ValueError):
    code = 11


class ConfigError(VQLError, ValueError):
    code = 12


class CorruptionError(VQLError):
    """An index or structure refers to something that cannot exist."""

    code = 13


class PreconditionError(VQLError, ValueError):
    code = 14


class EmptySequenceError(VQLError, ValueError):
    code = 15


class DegenerateCacheError(VQLError):
    code = 16


class CausalityError(VQLError, ValueError):
    code = 17


class TrainingDivergenceError(VQLError, FloatingPointError):
    """Raised when the loss goes non-finite; ``state`` holds the last parameters."""

    code = 18

    def __init__(self, message, state=None, dump_path=None):
        super().__init__(message)
        self.state = state
        self.dump_path = dump_path


class MissingInputError(VQLError, FileNotFoundError):
    code = 19


class MalformedEventLogError(VQLError, ValueError):
    code = 20


# cache file format errors
class CacheFormatError(VQLError):
    code = 30


class BadMagicError(CacheFormatError):
    code = 31


class VersionMismatchError(CacheFormatError):
    code = 32


class TruncatedFileError(CacheFormatError):
    code = 33


class StaleChecksumError(CacheFormatError):
    """Cache was built under a different codebook."""

    code = 34


class CorruptPayloadError(CacheFormatError):
    code = 35


class RecordTypeError(CacheFormatError):
    code = 36
