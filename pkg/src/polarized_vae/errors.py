"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1, data and
format problems exit 2, numeric failures exit 3.
"""


class PvaeError(Exception):
    """Base class for all package errors."""


class DimensionError(PvaeError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(PvaeError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class ContractError(PvaeError):
    """A call violated an API precondition."""


class NumericError(PvaeError):
    """A computation produced NaN/Inf, which is an error state, not a value."""


class OptimizerError(PvaeError):
    """Optimizer received invalid gradients; parameter state was not touched."""


class DataError(PvaeError):
    """A data record is missing a field or is otherwise unusable."""


class FormatError(PvaeError):
    """An input file does not conform to its expected format."""


class ParseError(FormatError):
    """Bracketed-tree text could not be parsed; carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MiningError(PvaeError):
    """Positive/negative mining cannot proceed on the given batch."""


class ConfigError(PvaeError):
    """Invalid or unknown configuration value."""
