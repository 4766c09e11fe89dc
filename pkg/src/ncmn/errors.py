"""Exception hierarchy shared by every module of the package."""


class NCMNError(Exception):
    """Base class for all errors raised by ``ncmn``."""


class ShapeError(NCMNError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(NCMNError, ValueError):
    """An invalid hyperparameter or configuration value."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(NCMNError, RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(NCMNError, ArithmeticError):
    """A non-finite value or a division by zero was produced."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``snapshot`` holds a small dict describing where it happened and
    ``report`` the partial training report collected so far.
    """

    def __init__(self, message, snapshot=None, report=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
        self.report = report


class DataError(NCMNError, ValueError):
    """Malformed dataset files or out-of-range labels."""


class DegenerateInputError(NCMNError, ValueError):
    """Input moments make an analytic quantity undefined."""
