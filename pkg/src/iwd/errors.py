"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class IWDError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(IWDError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class SizeError(ValidationError):
    pass


class LabelError(ValidationError, IndexError):
    pass


class NumericError(IWDError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, layer=None, state=None):
        super().__init__(message)
        self.layer = layer
        self.state = state


class ConvergenceError(NumericError):
    def __init__(self, message, marginal_error=None, iterations=None):
        super().__init__(message)
        self.marginal_error = marginal_error
        self.iterations = iterations


class FormatError(IWDError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PathError(IWDError, FileNotFoundError):
    exit_code = 4
