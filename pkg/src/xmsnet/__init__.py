"""XMSNet: RGB plus auxiliary-modality saliency network with coarse-to-fine decoding, built on a small numpy autodiff engine."""

from .config import DecoderConfig, EncoderConfig, FusionConfig, LossWeights, ModelConfig
from .losses import total_loss
from .model import XMSNet, count_parameters

__all__ = ["DecoderConfig", "EncoderConfig", "FusionConfig", "LossWeights", "ModelConfig",
           "XMSNet", "count_parameters", "total_loss"]
__version__ = "0.1.0"
