"""Exception hierarchy shared across the toolkit.

Each class carries the process exit code the ``feta`` command maps it to.
"""


class FetaError(Exception):
    exit_code = 1


class ConfigError(FetaError, ValueError):
    exit_code = 2


class DataError(FetaError, ValueError):
    exit_code = 3


class InfeasibleBudgetError(FetaError, ValueError):
    """Raised when fixed mechanisms already spend the target privacy budget."""

    exit_code = 4


class MissingArtifactError(FetaError, FileNotFoundError):
    exit_code = 5


class TrainingDivergenceError(FetaError, FloatingPointError):
    """Non-finite loss, gradient or update during training."""

    exit_code = 6

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage


class AccountingRangeError(FetaError, OverflowError):
    exit_code = 4


class PrivacyBoundaryError(FetaError, RuntimeError):
    """A post-processing stage tried to read the raw sensitive dataset."""
