"""Multi-domain, style-code driven image-to-image translation."""

from .config import ExperimentConfig, default_config, load_config, validate_config
from .training import ModelBundle, Trainer

__all__ = ["ExperimentConfig", "ModelBundle", "Trainer", "default_config", "load_config", "validate_config"]
__version__ = "0.1.0"
