"""Change captioning on a synthetic scene-pair world.

A small float64 autodiff core drives the full pipeline: cross-view pair
encoding with token-wise matching and contrastive alignment, a transformer
caption decoder, caption-to-image consistency supervision, training,
evaluation, and a CLI.
"""

from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, init_params, load_checkpoint, save_checkpoint, train

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "TrainConfig",
    "init_params",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

__version__ = "0.1.0"
