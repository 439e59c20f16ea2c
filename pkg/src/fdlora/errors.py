"""Exception hierarchy shared by every fdlora module."""


class FdloraError(Exception):
    """Base class for all errors raised by fdlora."""


class ShapeError(FdloraError, ValueError):
    pass


class InputError(FdloraError, ValueError):
    pass


class ContractError(FdloraError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(FdloraError, ValueError):
    pass


class NumericsError(FdloraError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FusionError(FdloraError, ValueError):
    pass


class OptimizationError(FdloraError, RuntimeError):
    pass


class SchemaError(FdloraError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
