"""Exception types shared across the package."""


class MagrecError(Exception):
    """Base class for every error raised by magrec."""


class DimensionError(MagrecError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MagrecError, RuntimeError):
    """A precondition of an operation was violated."""


class EmptyGraphError(ContractError):
    """A graph builder had nothing to build from."""


class ConfigError(MagrecError, ValueError):
    pass


class DataError(MagrecError, ValueError):
    pass


class FormatError(DataError):
    """Input file does not follow the expected layout."""


class ParseError(DataError):
    """A field could not be parsed into its declared type."""


class UndefinedMetricError(MagrecError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""
