"""Multimodal alignment pipeline at desk scale: IAN projector, dual loss, staged training, tool agent."""

from .ian import IanConfig, IanProjector, ian_forward
from .losses import combined_loss, itdm_loss, itg_loss
from .model import MageModel
from .tensor import Tensor, backward

__all__ = [
    "IanConfig",
    "IanProjector",
    "MageModel",
    "Tensor",
    "backward",
    "combined_loss",
    "ian_forward",
    "itdm_loss",
    "itg_loss",
]
__version__ = "0.1.0"
