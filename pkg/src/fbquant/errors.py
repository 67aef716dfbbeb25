"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: validation problems (shapes, formats,
schemas, bad values) exit 1, numeric failures exit 2.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class FormatError(ValueError):
    """A serialized container is malformed, truncated, or corrupted."""


class SchemaError(FormatError):
    """A container parses but violates the expected tensor naming/pairing."""


class DataError(ValueError):
    """Tensor payload contains non-finite or otherwise invalid values."""


class PreconditionError(ValueError):
    """An operation's stated precondition does not hold for the given input."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap before converging."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class NumericError(ArithmeticError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
