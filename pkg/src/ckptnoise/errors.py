"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and validation problems
exit 2, I/O and container problems exit 3, numeric/domain problems exit 4.
"""


class CkptNoiseError(Exception):
    """Base class for all package errors."""


class ValidationError(CkptNoiseError, ValueError):
    """A value violates a type invariant."""


class EmptyNameError(ValidationError):
    pass


class DuplicateNameError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DataLengthError(ValidationError):
    pass


class MissingTensorError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Bad configuration file, override or option value."""


class FormatError(CkptNoiseError):
    """A checkpoint file is not in a recognised container format."""


class CorruptionError(FormatError):
    """A checkpoint file is structurally valid but its payload is damaged."""


class DomainError(CkptNoiseError, ArithmeticError):
    """An operation is undefined for its inputs (empty pool, no labels...)."""


class NumericError(CkptNoiseError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""
