"""Speaker/emotion disentanglement toolkit on synthetic factor data."""

from .config import RunConfig
from .errors import DkitError
from .model import Model, ModelConfig, build_model
from .synthdata import DatasetSpec, make_dataset
from .trainer import load_checkpoint, save_checkpoint, train

__all__ = [
    "DatasetSpec",
    "DkitError",
    "Model",
    "ModelConfig",
    "RunConfig",
    "build_model",
    "load_checkpoint",
    "make_dataset",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
