"""Fokker-Planck densities from Feynman-Kac Monte-Carlo targets fitted by a
temporal normalizing flow."""

from .models import CATALOG_NAMES, SdeSpec, catalog, flowkac_transform
from .tnf import FlowConfig, TnfModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "CATALOG_NAMES",
    "SdeSpec",
    "catalog",
    "flowkac_transform",
    "FlowConfig",
    "TnfModel",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
]
__version__ = "0.1.0"
