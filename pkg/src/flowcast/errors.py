"""Exception types shared across the package."""


class FlowcastError(Exception):
    """Base class for all library-specific failures."""


class ShapeError(FlowcastError, ValueError):
    """Operands have incompatible or malformed shapes."""


class NumericError(FlowcastError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DataError(FlowcastError):
    """Input data is missing, malformed, or inconsistent."""


class FormatError(DataError):
    """A binary container (.flo file, checkpoint) violates its format."""


class ConfigError(FlowcastError):
    """A configuration is internally inconsistent or infeasible."""


class StatisticsUnsetError(FlowcastError):
    """Eval-mode normalization requested before any statistics were recorded."""
