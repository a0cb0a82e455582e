"""
Exception hierarchy shared by the core services and the command line
"""


class XvfgError(Exception):
    """Base class for every error raised by the package"""

    exit_code: int = 1


class ShapeError(XvfgError, ValueError):
    """Tensor shapes do not line up; the message names the dimension"""


class ConfigError(XvfgError, ValueError):
    """Invalid or unknown configuration"""

    exit_code = 2


class DataError(XvfgError):
    """Dataset or image file cannot be used"""

    exit_code = 3


class CheckpointError(XvfgError):
    """Checkpoint file is corrupt or does not match the configuration"""

    exit_code = 4


class GradcheckError(XvfgError):
    """Analytical and numerical gradients disagree"""

    exit_code = 5

    def __init__(self, message: str, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])
