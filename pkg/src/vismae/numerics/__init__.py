from vismae.numerics.functional import (
    activation,
    concat,
    dropout,
    embedding,
    feed_forward,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    mse,
    multi_head_attention,
    relu,
    softmax,
    weighted_cross_entropy,
)
from vismae.numerics.optim import AdamWState, adamw_step
from vismae.numerics.tensor import Tensor, as_tensor, backward, make_node, no_grad

__all__ = [
    "AdamWState",
    "activation",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "concat",
    "dropout",
    "embedding",
    "feed_forward",
    "gelu",
    "layer_norm",
    "linear",
    "log_softmax",
    "make_node",
    "mse",
    "multi_head_attention",
    "no_grad",
    "relu",
    "softmax",
    "weighted_cross_entropy",
]
