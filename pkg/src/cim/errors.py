"""Exception types shared across the package."""


class CimError(Exception):
    """Base class for all package errors."""


class ConfigError(CimError, ValueError):
    """Invalid configuration or constructor arguments."""


class ShapeError(CimError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(CimError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(CimError, RuntimeError):
    """An API was used out of order (stale cache, step after termination, ...)."""
