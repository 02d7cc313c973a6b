"""Exception taxonomy shared by the library and the CLI.

Each CLI-facing error carries the process exit code it maps to.
"""

from __future__ import annotations


class FuserlError(Exception):
    exit_code = 1


class ContractViolation(FuserlError, ValueError):
    """An operation was called outside its precondition (shapes, ranges)."""


class ConfigError(FuserlError):
    exit_code = 2

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DataIntegrityError(FuserlError):
    exit_code = 4


class ModelMismatchError(FuserlError):
    exit_code = 5


class MissingArtifactsError(FuserlError):
    exit_code = 6

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))


class DegenerateEstimateError(FuserlError):
    """Off-policy estimate has zero total importance weight."""


class UndefinedMetricError(FuserlError):
    """Metric undefined on the given input (e.g. every AUC group excluded)."""


class TrainingDivergedError(FuserlError):
    """A loss or parameter became non-finite during training."""
