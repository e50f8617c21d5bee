"""Exception hierarchy.

Every error carries a short machine-readable ``category`` so the command line
can report failures as ``error: <category>: <detail>``.
"""


class ActSeqError(Exception):
    category = "error"


class FormatError(ActSeqError):
    category = "format"


class ShapeError(ActSeqError, ValueError):
    category = "shape"


class NumericError(ActSeqError, ArithmeticError):
    category = "numeric"


class ConfigError(ActSeqError, ValueError):
    category = "config"


class UndefinedMetricError(NumericError, ValueError):
    """A metric whose denominator is zero for the given inputs."""


class SegmentError(ShapeError):
    """Segment list is not contiguous, overlaps, or contains empty segments."""
