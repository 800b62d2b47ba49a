"""Exception hierarchy shared by every module."""


class OavnnError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(OavnnError, ValueError):
    """An argument broke a documented precondition (shape, range, label set)."""


class DomainError(OavnnError, ArithmeticError):
    """A numeric function was evaluated outside of its domain."""


class NumericalError(OavnnError, FloatingPointError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ParseError(OavnnError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(OavnnError, ValueError):
    pass


class DegenerateCloudError(OavnnError, ValueError):
    pass


class DegenerateDirectionError(OavnnError, ValueError):
    pass


class ConfigError(OavnnError, ValueError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
