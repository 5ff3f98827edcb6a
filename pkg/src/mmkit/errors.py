"""Exception types shared across the kit."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class ContractError(RuntimeError):
    """An API was called outside its stated preconditions."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class EmptyLossError(ValueError):
    """A loss was requested over zero supervised positions."""


class EmptySequenceError(ValueError):
    """A token sequence with zero positions was requested."""
