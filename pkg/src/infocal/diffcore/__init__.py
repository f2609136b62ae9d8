from . import checkpoint
from .layers import BiGRU, Bilinear, Embedding, GRUCell, Linear, Module, SequenceEncoder, encode_sequence
from .optim import AdamState, adam_step
from .tensor import (
    LOG_EPS,
    LOGIT_CLAMP,
    PRIMITIVE_KINDS,
    ShapeError,
    Tape,
    Tensor,
    backward,
    forward_primitive,
    parameter,
    precision,
)

__all__ = [
    "AdamState",
    "BiGRU",
    "Bilinear",
    "Embedding",
    "GRUCell",
    "LOG_EPS",
    "LOGIT_CLAMP",
    "Linear",
    "Module",
    "PRIMITIVE_KINDS",
    "SequenceEncoder",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "checkpoint",
    "encode_sequence",
    "forward_primitive",
    "parameter",
    "precision",
]
