"""Exception types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""

    exit_code = 2


class DataError(RuntimeError):
    """Malformed input data, e.g. an open mesh (exit code 3)."""

    exit_code = 3


class NumericError(FloatingPointError):
    """Non-finite loss or parameters during training (exit code 4)."""

    exit_code = 4
