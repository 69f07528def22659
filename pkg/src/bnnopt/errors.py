"""Structured errors shared across the package.

Exit codes used by the CLI: 0 success, 2 config error, 3 data error,
4 runtime numeric error; anything else maps to 1.
"""


class BnnError(Exception):
    exit_code = 1


class ConfigError(BnnError):
    """Invalid configuration. Collects every violation, not just the first."""

    exit_code = 2

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(BnnError):
    """Dataset or file parsing failure."""

    exit_code = 3


class NumericError(BnnError):
    """Non-finite value produced by a forward or backward computation."""

    exit_code = 4


class ShapeError(BnnError):
    """Operand shapes are incompatible."""


class GraphStateError(BnnError):
    """Graph used out of order, e.g. backward before forward."""


class DegenerateBatchError(BnnError):
    """Batch normalization asked to train on a batch of size 1."""


class CapacityError(BnnError):
    """Problem size exceeds what exhaustive enumeration supports."""


class CheckpointError(BnnError):
    """Checkpoint file is truncated, corrupt, or has the wrong version."""
