"""Few-shot fruit segmentation: a ResNet-18 network with a boundary-guided decoder,
synthetic orchard data, training regimes for transfer, and evaluation tools."""

from fruitseg.errors import (
    ConfigError,
    DataError,
    FruitSegError,
    OracleContractError,
    ShapeError,
    UndefinedMetricError,
    UnsupportedVariantError,
)
from fruitseg.model import ArchitectureConfig, FruitSegNet, ForwardOutput, build_model, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "ConfigError",
    "DataError",
    "ForwardOutput",
    "FruitSegError",
    "FruitSegNet",
    "OracleContractError",
    "ShapeError",
    "UndefinedMetricError",
    "UnsupportedVariantError",
    "build_model",
    "count_parameters",
]
