"""Exception types shared across the library."""


class AirlError(Exception):
    """Base class for all library errors; the CLI maps these to exit code 1."""


class DimensionError(AirlError):
    """Shapes incompatible for the requested operation."""


class DegenerateFeatureError(AirlError):
    """A feature row has (near-)zero norm and cannot be normalized."""


class OracleError(AirlError):
    """The finite-difference oracle hit a non-finite function value."""


class BatchTooSmallError(AirlError):
    """Training-mode batch normalization needs at least two samples."""


class NumericOverflowError(AirlError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(AirlError):
    """Invalid configuration value, key, or combination."""


class ArchitectureMismatchError(AirlError):
    """Two models that must share an architecture do not."""


class FeatureCollapseError(AirlError):
    """Extracted features are (near-)constant; evaluation would be meaningless."""


class CheckpointError(AirlError):
    """Checkpoint file is malformed, has the wrong magic, or wrong version."""
