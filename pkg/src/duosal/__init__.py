"""duosal: salient-object detection from an RGB image plus a second cue.

A multi-resolution windowed-attention trunk refines the RGB stream; the
second modality (depth map, thermal frame, or a focal sweep) is encoded
by a light residual stream and folded in twice — gated injection where
each trunk branch starts, and token-level cross-resolution fusion at the
end. Everything runs on the package's own numpy reverse-mode engine, so
the whole model is finite-difference checkable.
"""

from .config import ConfigError, ModelConfig, TrainConfig, load_config
from .pipeline import Model, count_params_flops

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "load_config",
    "Model",
    "count_params_flops",
]

__version__ = "0.1.0"
