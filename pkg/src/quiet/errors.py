"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes that cannot be combined."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class DataError(ValueError):
    """A dataset record is malformed or out of range."""


class ConfigError(ValueError):
    """A run configuration is inconsistent."""
