"""Core components for cross-view synthesis"""

from .config_service import ConfigService
from .errors import CheckpointError, ConfigError, DataError, GradcheckError, ShapeError, XvfgError

__all__ = [
    "ConfigService",
    "XvfgError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "CheckpointError",
    "GradcheckError",
]
