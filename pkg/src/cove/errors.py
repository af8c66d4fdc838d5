class CoveError(Exception):
    exit_code = 1


class ConfigError(CoveError, ValueError):
    """Invalid run or training configuration."""

    exit_code = 2


class DataError(CoveError):
    """Unreadable, malformed or inconsistent input data or files."""

    exit_code = 3


class DivergenceError(CoveError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 4
