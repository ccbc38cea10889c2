"""Minimal float64 tensor engine: autograd, layers, AdamW, checkpoints."""

from .autograd import NonFiniteError, Tape, Tensor, as_tensor, backward, softmax_rows
from .checkpoint import read_checkpoint, write_checkpoint
from .nn import MLP, Dropout, LayerNorm, Linear, MlpConfig, Module, mlp_forward
from .optim import AdamW, AdamWState, adamw_step
from .rng import RngStreams

__all__ = [
    "MLP",
    "AdamW",
    "AdamWState",
    "Dropout",
    "LayerNorm",
    "Linear",
    "MlpConfig",
    "Module",
    "NonFiniteError",
    "RngStreams",
    "Tape",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "mlp_forward",
    "read_checkpoint",
    "softmax_rows",
    "write_checkpoint",
]
