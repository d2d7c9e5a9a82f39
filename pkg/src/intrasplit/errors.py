"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class IntraSplitError(Exception):
    exit_code = 1


class ConfigError(IntraSplitError, ValueError):
    exit_code = 2


class DataError(IntraSplitError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(IntraSplitError, ArithmeticError):
    exit_code = 4


class ShapeError(IntraSplitError, ValueError):
    """Operand shapes are incompatible for an op."""


class ContractError(IntraSplitError, ValueError):
    """A caller violated a documented precondition."""
