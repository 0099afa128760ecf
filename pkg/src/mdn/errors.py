"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class MDNError(Exception):
    exit_code = 1


class ConfigError(MDNError, ValueError):
    exit_code = 1


class ShapeError(MDNError, ValueError):
    exit_code = 1


class DataError(MDNError):
    exit_code = 2


class DataFormatError(DataError, ValueError):
    pass


class CoverageError(DataError, ValueError):
    """A (target, bias) partition needed by a group loss or sampler is empty."""


class NumericError(MDNError, FloatingPointError):
    exit_code = 3
