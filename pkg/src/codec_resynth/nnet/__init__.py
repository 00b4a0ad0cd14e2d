"""Small trainable-network toolkit: autodiff, conditioned MLP, Adam, checkpoints."""

from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .embeddings import stage_table_shape, time_embedding
from .mlp import NetSpec, ParameterSet, forward, init_params, value_and_grad
from .optim import PEAK_LR, AdamHyper, AdamState, adam_step, lr_at

__all__ = [
    "AdamHyper", "AdamState", "NetSpec", "PEAK_LR", "ParameterSet", "Tensor", "adam_step",
    "forward", "init_params", "load_checkpoint", "lr_at", "save_checkpoint",
    "stage_table_shape", "time_embedding", "value_and_grad",
]
