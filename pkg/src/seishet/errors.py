"""Exception hierarchy shared by the whole package.

Everything raised on purpose derives from SeishetError so the command line
tool can catch one type and report it cleanly.
"""


class SeishetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SeishetError):
    """Array rank or shape does not match what an operation requires."""


class LabelError(SeishetError):
    """A label map contains values other than 0 and 1."""


class ConfigError(SeishetError):
    """Configuration values are out of range or mutually inconsistent."""


class FormatError(SeishetError):
    """A file on disk does not follow its declared format."""


class IntegrityError(FormatError):
    """A file parses but its contents contradict themselves."""


class LineNotFoundError(SeishetError):
    """A requested inline or crossline number is absent from a volume."""


class EvaluationError(SeishetError):
    """A numeric computation produced non-finite values."""


class DataError(SeishetError):
    """A dataset is empty, truncated, or too small for the requested use."""
