"""Exception hierarchy shared across the package."""


class ContractError(RuntimeError):
    """A precondition or postcondition of an operation was violated."""


class DimensionError(ContractError, ValueError):
    """Operand shapes do not line up."""


class NonFiniteError(ContractError, FloatingPointError):
    """A forward value or a loss became NaN or Inf."""


class ConfigError(ValueError):
    """Malformed configuration, checkpoint, or command-line input."""
