"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class GenerationError(RuntimeError):
    """Task generation could not satisfy its verification conditions."""
