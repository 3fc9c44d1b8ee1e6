"""Exception hierarchy shared by all fruitseg modules."""


class FruitSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FruitSegError, ValueError):
    """Invalid configuration or unsatisfied precondition on parameters."""


class ShapeError(FruitSegError, ValueError):
    """Tensor or raster shapes do not satisfy an operation's contract."""


class UnsupportedVariantError(FruitSegError):
    """Operation not available for the model's architecture variant."""


class DataError(FruitSegError):
    """Missing, unreadable or invalid data files."""


class OracleContractError(DataError):
    """An instance-mask oracle violated its contract."""


class UndefinedMetricError(FruitSegError, ArithmeticError):
    """A metric is undefined for the given confusion matrix."""
