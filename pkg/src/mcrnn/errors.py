"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3. Everything else is a programming error and escapes.
"""


class ShapeError(ValueError):
    """Operand dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Bad configuration file, unknown key, or invalid CLI usage."""


class DataError(ValueError):
    """Corpus/batch problems: missing files, empty streams, bad token ids."""


class NumericError(ArithmeticError):
    """Non-finite loss or a failed gradient certification."""


class TapeMismatchError(ValueError):
    """A backward pass was handed a tape that does not match its parameters."""
