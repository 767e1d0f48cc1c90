"""Exception hierarchy shared by every module."""


class HarmonyError(Exception):
    """Base class for all package errors."""


class ConfigError(HarmonyError, ValueError):
    pass


class DimensionError(HarmonyError, ValueError):
    pass


class ManifestError(HarmonyError, ValueError):
    pass


class InsufficientNegativesError(ConfigError):
    """Raised when a batch is too small to provide an in-batch negative."""


class DivergenceError(HarmonyError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SplitError(HarmonyError, ValueError):
    pass


class EvalError(HarmonyError, ValueError):
    pass


class CheckpointError(HarmonyError, ValueError):
    pass


class FormatError(HarmonyError, ValueError):
    """Malformed dataset or checkpoint file."""
