"""Exception types shared across the package."""


class SrquantError(Exception):
    """Base class for all package errors."""


class DimensionError(SrquantError):
    """Shapes or sizes of operands are incompatible."""


class ContractViolation(SrquantError):
    """A numeric contract was broken (NaN/Inf where finite values are required)."""


class RangeCollapseError(SrquantError):
    """A quantization range degenerated (upper bound not above lower bound)."""


class UsageError(SrquantError):
    """An API was called out of sequence or with an exhausted resource."""


class ConfigError(SrquantError):
    """Invalid configuration key, value, or combination."""


class AccountingError(SrquantError):
    """A complexity computation was asked about a tensor it has no record of."""


class NumericError(SrquantError):
    """Training or evaluation produced non-finite values."""
