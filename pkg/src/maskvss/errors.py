"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or dimensions."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, malformed, or inconsistent with the model."""
