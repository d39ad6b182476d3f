"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3. Anything else is a bug and propagates as a traceback.
"""


class ConfigError(ValueError):
    """Invalid configuration or unusable combination of options."""


class DataError(ValueError):
    """Malformed, inconsistent, or degenerate input data."""


class NumericalError(ArithmeticError):
    """Non-finite values, singular systems, or diverging optimization."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""
