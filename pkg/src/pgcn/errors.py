"""Exception hierarchy shared across the package."""


class PGCNError(Exception):
    """Base class for all package errors."""


class DimensionError(PGCNError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(PGCNError, RuntimeError):
    """A call violated a documented precondition."""


class NumericHealthError(PGCNError, FloatingPointError):
    """A non-finite value reached a place that requires finite numbers."""


class ConfigurationError(PGCNError, ValueError):
    """Invalid configuration value or combination of values."""


class IngestionError(PGCNError):
    """A dataset on disk does not follow the expected layout."""


class UndefinedMetricError(PGCNError, ValueError):
    """A metric is undefined for the given input (e.g. one class only)."""


class CheckpointError(PGCNError):
    """Checkpoint file could not be read."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
