"""Conditional transformer U-Net for embryonic cartilage segmentation, on a
from-scratch numpy autodiff engine."""

from .model import ConUNETR, ModelConfig, UNet, UNetConfig, build_model, preset_config, unet_preset_config

__all__ = ["ConUNETR", "ModelConfig", "UNet", "UNetConfig", "build_model", "preset_config", "unet_preset_config"]
__version__ = "0.1.0"
