"""Multi-level deep representation network for image emotion classification, in numpy."""

from .fusion import FUSION_KINDS, fuse
from .model import MldrNet, ModelConfig, build, desk_config, load, full_config, save

__all__ = ["FUSION_KINDS", "fuse", "MldrNet", "ModelConfig", "build", "desk_config", "full_config",
           "load", "save"]
__version__ = "0.1.0"
