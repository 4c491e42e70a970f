"""Compact 3D shape VAE with a pruned triplane decoder and latent diffusion."""

from .config import Config, load_config
from .errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["Config", "load_config", "ConfigError", "DataError", "NumericError", "__version__"]
