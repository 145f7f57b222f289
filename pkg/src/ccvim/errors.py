"""Exception hierarchy shared by every ccvim module.

The CLI maps ``ContractError``/``ConfigError`` (and subclasses) to exit code 1
and ``NumericError`` to exit code 2.
"""


class CCViMError(Exception):
    pass


class ContractError(CCViMError, ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(CCViMError, ValueError):
    """Invalid configuration value, file or network geometry."""


class LoadError(ConfigError):
    """A checkpoint or data file could not be read consistently."""


class NumericError(CCViMError, ArithmeticError):
    """Non-finite values or a failed numerical check."""
