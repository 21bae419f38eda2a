"""Exception hierarchy. The CLI maps each family to an exit code."""


class RcgError(Exception):
    exit_code = 1


class ConfigError(RcgError, ValueError):
    """Invalid configuration or shape mismatch."""


class UsageError(RcgError, ValueError):
    """API misuse: missing cache, bad argument, out-of-range index."""


class DataError(RcgError):
    exit_code = 2


class FormatError(DataError, ValueError):
    """Malformed file on disk (IDX, checkpoint container, PGM)."""


class DegenerateRepresentationError(DataError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"item {index}: {message}")
        self.index = index


class TrainingError(RcgError, RuntimeError):
    """Non-finite loss or gradient during optimization."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
