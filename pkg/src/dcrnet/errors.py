"""Exception hierarchy. Each class maps to one CLI exit code."""


class DcrNetError(Exception):
    exit_code = 1


class UsageError(DcrNetError):
    """API or command misuse (non-scalar backward, epoch past schedule end...)."""

    exit_code = 1


class ConfigError(DcrNetError, ValueError):
    """Invalid architecture, schedule, generator or convolution configuration."""

    exit_code = 2


class DimensionError(DcrNetError, ValueError):
    """Tensor shapes that do not fit an operation."""

    exit_code = 2

    def __init__(self, op, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


class DataError(DcrNetError):
    """Unreadable, corrupt or degenerate data and checkpoint files."""

    exit_code = 3


class NumericError(DcrNetError):
    """Non-finite values produced during training or evaluation."""

    exit_code = 4
