"""Dense float64 arrays, tape-based reverse-mode autodiff, and neural layers."""

from . import functional
from .checkpoint import CheckpointError, load_params, save_params
from .functional import ShapeError, conv2d, sinusoidal_time_embed
from .layers import LayerSpec, ParamView, to_tensors
from .optim import Adam, ema_update, global_norm
from .tensor import AutodiffError, Tape, Tensor, backward, no_record

__all__ = [
    "Adam",
    "AutodiffError",
    "CheckpointError",
    "LayerSpec",
    "ParamView",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "conv2d",
    "ema_update",
    "functional",
    "global_norm",
    "load_params",
    "no_record",
    "save_params",
    "sinusoidal_time_embed",
    "to_tensors",
]
