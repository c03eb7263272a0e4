"""Per-class-token vision transformer and attention-based localization maps, at desk scale.

A from-scratch NumPy implementation: a reverse-mode autodiff engine, a
vision transformer with one class token per class, localization maps built
from its attention, a training loop, a synthetic benchmark and evaluation.
"""

__version__ = "0.1.0"

from .config import ModelConfig, RunParams  # noqa: E402
from .model import forward, init_params, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "ModelConfig",
    "RunParams",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
