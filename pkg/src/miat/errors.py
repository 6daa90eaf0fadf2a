"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MiatError(Exception):
    exit_code = 1


class UsageError(MiatError):
    exit_code = 1


class ConfigError(MiatError, ValueError):
    exit_code = 1


class DataError(MiatError, ValueError):
    exit_code = 2


class DimensionError(DataError):
    """Shapes of operands do not agree."""


class DegenerateMaskError(DataError):
    """An attention row has every key masked out."""


class CheckpointError(DataError):
    """Bad magic, unsupported version, or a truncated checkpoint file."""


class NumericError(MiatError, ArithmeticError):
    exit_code = 3
