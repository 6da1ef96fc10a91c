"""Desk-scale dual-modality distillation with quantization-aware contrastive learning."""

from .autodiff import Tensor
from .config import Config, load_config
from .encoder import DenseEncoder, init_encoder
from .pipeline import run_pipeline
from .quant import QuantScheme

__version__ = "0.1.0"

__all__ = [
    "Config",
    "DenseEncoder",
    "QuantScheme",
    "Tensor",
    "init_encoder",
    "load_config",
    "run_pipeline",
    "__version__",
]
