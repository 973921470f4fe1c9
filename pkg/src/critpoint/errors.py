"""Exception hierarchy shared across the package."""


class CritpointError(Exception):
    """Base class for all package errors."""


class ShapeError(CritpointError, ValueError):
    """Operand shapes do not conform to an operation's precondition."""


class NumericError(CritpointError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateInputError(CritpointError, ValueError):
    """Input is valid in shape but carries no usable information."""


class CheckpointError(CritpointError):
    """Checkpoint file is corrupt, truncated or incompatible."""


class ParseError(CritpointError, ValueError):
    """Malformed text input; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VictimError(CritpointError, ValueError):
    """An attack was asked to start from a cloud the network misclassifies."""
