"""Exception types shared across the package."""


class SfbnetError(Exception):
    """Base class for all package errors."""


class DimensionError(SfbnetError, ValueError):
    """Shapes are inconsistent; the message names the offending axes."""


class ConfigError(SfbnetError, ValueError):
    """A configuration value or combination is invalid."""


class ContractError(SfbnetError, RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class DataError(SfbnetError, ValueError):
    """Input data violates its declared domain (e.g. out-of-range labels)."""


class GeometrySpecError(SfbnetError, ValueError):
    """Phantom geometry parameters do not fit inside the image bounds."""


class NumericError(SfbnetError, ArithmeticError):
    """A numerical failure such as a NaN loss during training."""
