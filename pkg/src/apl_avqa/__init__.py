"""Audio-visual question answering with adaptive-positivity contrastive learning.

Everything runs on a small numpy autograd engine (:mod:`apl_avqa.tensorcore`)
so that the whole model, its losses, and its gradients can be checked on a
single CPU.
"""

from .blocks import TFM, ModelDims
from .model import APLModel, ModelConfig
from .positivity import LossConfig, positivity_loss, segment_loss, select_positivity, similarity_row
from .scenes import FeatureContainer, SceneDims, generate_dataset, read_container, write_container

__all__ = [
    "APLModel",
    "FeatureContainer",
    "LossConfig",
    "ModelConfig",
    "ModelDims",
    "SceneDims",
    "TFM",
    "generate_dataset",
    "positivity_loss",
    "read_container",
    "segment_loss",
    "select_positivity",
    "similarity_row",
    "write_container",
]

__version__ = "0.1.0"
