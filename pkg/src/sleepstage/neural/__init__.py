"""Minimal differentiable layer set for the staging networks."""

from .functional import (
    avg_pool,
    batch_norm,
    conv_forward,
    cross_entropy,
    dense,
    dropout,
    lstm_forward,
    relu,
    sgd_step,
    softmax,
)
from .gradcheck import check_layer, check_network, gradient_check
from .layers import Sequential

__all__ = [
    "avg_pool",
    "batch_norm",
    "check_layer",
    "check_network",
    "conv_forward",
    "cross_entropy",
    "dense",
    "dropout",
    "gradient_check",
    "lstm_forward",
    "relu",
    "Sequential",
    "sgd_step",
    "softmax",
]
