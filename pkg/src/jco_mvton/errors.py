"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array extents do not line up for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where only finite values are allowed."""
