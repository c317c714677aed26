"""Exception hierarchy shared across the package."""

import numpy as np


class InvariantLabError(Exception):
    """Base class for all package errors."""


class InputError(InvariantLabError, ValueError):
    """Malformed state vectors, shapes or values."""


class UnsupportedSystemError(InvariantLabError, ValueError):
    pass


class IntegrationError(InvariantLabError, RuntimeError):
    """Adaptive integration failed; ``t_last`` is the last accepted time."""

    def __init__(self, message, t_last=None, trajectory_index=None):
        super().__init__(message)
        self.t_last = t_last
        self.trajectory_index = trajectory_index


class NormalizationError(InvariantLabError, ValueError):
    pass


class SplitError(InvariantLabError, ValueError):
    pass


class StateError(InvariantLabError, RuntimeError):
    """Operation not valid for the current provenance of a batch."""


class FormatError(InvariantLabError, ValueError):
    """Bad magic, version mismatch or truncated binary file."""


class ConfigError(InvariantLabError, ValueError):
    pass


class ShapeError(InvariantLabError, ValueError):
    pass


class StaleTapeError(InvariantLabError, RuntimeError):
    pass


class OptimizerError(InvariantLabError, FloatingPointError):
    pass


class NonFiniteLossError(InvariantLabError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class AlignmentDegenerateError(InvariantLabError, FloatingPointError):
    """Zero-variance batch in the standardized alignment term."""


class DegenerateMetricError(InvariantLabError, ValueError):
    """A correlation metric is undefined because an input has zero variance."""


class SingularFitError(InvariantLabError, np.linalg.LinAlgError):
    pass


class RolloutDivergedError(InvariantLabError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
