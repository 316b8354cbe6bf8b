class ConfigError(ValueError):
    """Invalid configuration or scene description values."""


class ContractError(ValueError):
    """Inputs violate an operation's preconditions (shapes, intrinsics, ...)."""


class InitializationError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Training produced non-finite losses or parameters."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ParseError(ValueError):
    """Malformed image or data file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericalError(ArithmeticError):
    pass
