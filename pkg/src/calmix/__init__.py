"""Fine-grained recognition training settings (FZ, FT, CAL, CAL-NC, CALMix,
CALMix-NC) with an accuracy-vs-cost benchmark harness."""

from calmix.backbones import create_backbone, list_backbones, register_backbone
from calmix.settings import TrEvSetting, build_model, infer, train_step

__version__ = "0.1.0"

__all__ = [
    "TrEvSetting",
    "build_model",
    "create_backbone",
    "infer",
    "list_backbones",
    "register_backbone",
    "train_step",
]
