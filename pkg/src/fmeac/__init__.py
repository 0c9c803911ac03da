"""Feature-model enhanced actor-critic for multi-UAV path planning."""

from .config import ExperimentConfig, defaults_for, load_config, parse_config, serialize_config
from .errors import ConfigError, ContractError, DimensionError, DomainError, FmeacError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "defaults_for", "load_config", "parse_config", "serialize_config",
    "ConfigError", "ContractError", "DimensionError", "DomainError", "FmeacError", "NumericError",
]
