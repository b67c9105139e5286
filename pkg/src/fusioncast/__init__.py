"""Radar and GNSS water-vapour fusion nowcasting on a small numpy autodiff core."""

from .model import VARIANTS, FusionCast, InputBundle, ModelConfig

__all__ = ["VARIANTS", "FusionCast", "InputBundle", "ModelConfig"]
__version__ = "0.1.0"
