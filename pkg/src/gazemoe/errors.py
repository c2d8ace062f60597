"""Exception types shared across the package."""


class GazeMoEError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GazeMoEError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(GazeMoEError, ValueError):
    """An input has (near) zero norm where a direction is required."""


class DegeneratePredictionError(DegenerateInputError):
    """The gaze head produced a collapsed, near-zero prediction."""


class NumericError(GazeMoEError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class ContractError(GazeMoEError, ValueError):
    """A documented precondition was violated by the caller."""


class TrainingDivergenceError(GazeMoEError, RuntimeError):
    """Loss or gradients became non-finite during training."""


class ConfigError(GazeMoEError, ValueError):
    """Invalid run configuration."""


class IntegrityError(GazeMoEError, ValueError):
    """A serialized file is corrupt, truncated or of an unsupported version."""
