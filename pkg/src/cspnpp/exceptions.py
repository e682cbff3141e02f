"""Exception hierarchy shared by all modules."""


class CSPNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CSPNError, ValueError):
    """Array shapes are inconsistent or a dimension is non-positive."""


class ConfigurationError(CSPNError, ValueError):
    """A kernel size, checkpoint list or budget is not valid for the configuration."""


class ContractError(CSPNError, ValueError):
    """A precondition of an operation is violated."""


class FormatError(CSPNError, ValueError):
    """A raster file is malformed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(CSPNError, ValueError):
    """A value cannot be represented in the target encoding."""


class DivergenceError(CSPNError, ArithmeticError):
    """An optimisation run produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
