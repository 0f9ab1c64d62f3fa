from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    add_scalar,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    precision,
    reshape,
    scale,
    scaled_attention,
    smooth_l1,
    softmax,
    sub,
    sum_,
    swap_last,
    take,
    transpose,
)
from .nn import MLP, Block, LayerNorm, Linear, Module, MultiHeadAttention, attention, sinusoid
from .optim import AdamW, OptimizerState

__all__ = [
    "AdamW", "Block", "LayerNorm", "Linear", "MLP", "Module", "MultiHeadAttention", "NonFiniteError",
    "OptimizerState", "ShapeError", "Tensor", "add", "add_scalar", "as_tensor", "attention", "backward",
    "broadcast_to", "concat", "cross_entropy", "gelu", "layer_norm", "linear", "matmul", "mean", "mse", "mul", "no_grad",
    "precision", "reshape", "scale", "scaled_attention", "sinusoid", "smooth_l1", "softmax", "sub", "sum_", "swap_last", "take",
    "transpose",
]
