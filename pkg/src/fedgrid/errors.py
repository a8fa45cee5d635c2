"""Exception hierarchy shared by the simulator, learners and CLI."""


class FedGridError(Exception):
    """Base class for all package errors."""


class DomainError(FedGridError, ValueError):
    """An input lies outside the domain an operation accepts."""


class ProtocolError(FedGridError, RuntimeError):
    """An operation was called out of order (stale cache, step after done, ...)."""


class ConvergenceError(FedGridError, RuntimeError):
    """An iterative solve did not converge."""


class NonFiniteError(FedGridError, FloatingPointError):
    """A loss or gradient became NaN/inf; the update that produced it was skipped."""


class ConfigError(FedGridError, ValueError):
    """A configuration document could not be parsed or validated."""


class CheckpointError(FedGridError, IOError):
    """A checkpoint file is malformed, truncated, or incompatible."""


class TrainingError(FedGridError, RuntimeError):
    """A training run aborted; the message carries episode/step indices."""
