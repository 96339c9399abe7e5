"""RGB-D salient object detection with a bifurcated backbone and
depth-enhanced cross-modal fusion."""

from .model import BBSNet, BbsOutputs, ModelConfig, VariantTag, build_variant, total_loss
from .backbone import BackboneConfig

__version__ = "0.1.0"

__all__ = ["BBSNet", "BbsOutputs", "ModelConfig", "VariantTag", "BackboneConfig", "build_variant",
           "total_loss", "__version__"]
