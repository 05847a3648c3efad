"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input violated a documented precondition (shape, range, state)."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary or JSON layout."""
