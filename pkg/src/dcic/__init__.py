"""Learned image compression with a self-generated structure prior.

A decoded low-cost structure latent conditions the analysis transform, the
entropy model for the detail latent, and the synthesis transform; all four
latent streams are entropy-coded into one decodable bitstream.
"""

from .errors import (BitstreamError, CodingError, ConfigError,
                     ModelMismatchError, TrainingDivergedError, TrainingError)
from .transforms import (ChannelPlan, CodecModel, ConditioningFlags,
                         load_checkpoint, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "BitstreamError", "ChannelPlan", "CodecModel", "CodingError",
    "ConditioningFlags", "ConfigError", "ModelMismatchError",
    "TrainingDivergedError", "TrainingError",
    "load_checkpoint", "save_checkpoint", "__version__",
]
