"""Exception types shared across the engine, with CLI exit codes attached."""


class CfsrError(Exception):
    """Base class for engine errors; ``exit_code`` drives the CLI exit status."""

    exit_code = 1


class ShapeError(CfsrError):
    """Operand shapes do not satisfy an operation's contract."""

    exit_code = 4


class ConfigError(CfsrError):
    """Invalid configuration, flag value, or weight/config mismatch."""

    exit_code = 4


class ModeError(CfsrError):
    """Operation invoked in the wrong model mode (branched vs fused)."""

    exit_code = 4


class DataError(CfsrError):
    """File I/O failure: missing, corrupt, or malformed input data."""

    exit_code = 3


class NumericError(CfsrError):
    """Non-finite values where finite ones are required."""

    exit_code = 5
