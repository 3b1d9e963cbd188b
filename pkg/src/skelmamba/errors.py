"""Exception types raised across the package."""


class SkelMambaError(Exception):
    pass


class DimensionError(SkelMambaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SkelMambaError, ValueError):
    """A configuration value violates a structural constraint."""


class DomainError(SkelMambaError, ValueError):
    """An argument lies outside the domain of the operation."""


class UsageError(SkelMambaError, ValueError):
    pass


class NumericError(SkelMambaError, FloatingPointError):
    """A NaN or infinity appeared in a forward or backward pass."""


class ParseError(SkelMambaError, ValueError):
    pass


class SchemaError(SkelMambaError, ValueError):
    pass
