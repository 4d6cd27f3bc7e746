"""
Exception hierarchy shared by all services
"""
from typing import Optional


class PanopticError(Exception):
    """Base class for every error raised by the mapping engine"""


class InputError(PanopticError):
    """Malformed input: dimension mismatch, invalid pose, bad argument"""


class MapResourceError(PanopticError):
    """Voxel block allocation failed"""


class RegistryError(PanopticError):
    """Instance not present in the probability registry"""


class CrfSizeError(PanopticError):
    """Submap too large for exhaustive mean-field inference"""


class ConfigError(PanopticError):
    """Run configuration failed validation"""


class DatasetError(PanopticError):
    """Dataset-level problem that aborts a replay"""


class FrameError(PanopticError):
    """A single frame could not be decoded or validated"""

    def __init__(self, index: int, message: str, cause: Optional[BaseException] = None):
        super().__init__(f"frame {index}: {message}")
        self.index = index
        self.cause = cause
