"""Exception types shared across the package."""


class FmeacError(Exception):
    pass


class DimensionError(FmeacError, ValueError):
    """Input shape does not match what a network or function expects."""


class ContractError(FmeacError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FmeacError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class DomainError(FmeacError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ConfigError(FmeacError, ValueError):
    pass
