from .tensor import NEG_INF, Tensor
from .layers import (
    Conv1d,
    CrossAttention,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    ShapeError,
    mean_pool,
    sinusoidal_position_encoding,
    valid_mask,
)
from .optim import AdamW, cosine_lr
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint

__all__ = [
    "NEG_INF",
    "Tensor",
    "Conv1d",
    "CrossAttention",
    "Embedding",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadSelfAttention",
    "Parameter",
    "ShapeError",
    "mean_pool",
    "sinusoidal_position_encoding",
    "valid_mask",
    "AdamW",
    "cosine_lr",
    "grad_check",
    "CheckpointError",
    "load_checkpoint",
    "read_meta",
    "save_checkpoint",
]
