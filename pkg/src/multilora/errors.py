"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class FormatError(ValueError):
    """A file or record does not follow the expected layout."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numerical routine."""


class DegenerateInputError(ValueError):
    """Input is well-formed but makes the requested quantity meaningless."""
