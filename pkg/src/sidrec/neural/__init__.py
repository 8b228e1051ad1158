from .tensor import Tensor, Parameter, constant, no_grad, stop_gradient
from .ops import (
    add, add_n, scale, add_const, exp, expm1, clip_min, relu,
    concat_vec, concat_rows, reshape, take_rows, take_row, pick,
    embed_lookup, matmul, linear, layer_norm,
    causal_self_attention, attention_pool,
    softmax_cross_entropy, sigmoid_bce,
    log_softmax_values, sigmoid_value,
)
from .optim import AdamW
from .gradcheck import finite_diff_check
from .checkpoint import save_arrays, load_arrays

__all__ = [
    "Tensor", "Parameter", "constant", "no_grad", "stop_gradient",
    "add", "add_n", "scale", "add_const", "exp", "expm1", "clip_min", "relu",
    "concat_vec", "concat_rows", "reshape", "take_rows", "take_row", "pick",
    "embed_lookup", "matmul", "linear", "layer_norm",
    "causal_self_attention", "attention_pool",
    "softmax_cross_entropy", "sigmoid_bce",
    "log_softmax_values", "sigmoid_value",
    "AdamW", "finite_diff_check", "save_arrays", "load_arrays",
]
