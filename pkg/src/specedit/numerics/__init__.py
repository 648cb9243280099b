"""Minimal dense-tensor and reverse-mode differentiation substrate."""

from .gradcheck import grad_check, grad_check_multi
from .kernels import backend as kernel_backend
from .tensor import (
    Tensor,
    add,
    add_bias,
    add_example_bias,
    add_scalar,
    attention,
    attention_heads,
    avgpool2x2,
    bmm,
    concat_last,
    conv3x3,
    embedding,
    layernorm,
    matmul,
    mean_,
    mul,
    project,
    reshape,
    scale,
    silu,
    softmax,
    sub,
    sum_,
    tensor,
    transpose,
    upsample2x,
    zeros,
)

__all__ = [
    "Tensor", "add", "add_bias", "add_example_bias", "add_scalar", "attention", "attention_heads",
    "avgpool2x2", "bmm", "concat_last", "conv3x3", "embedding", "grad_check",
    "grad_check_multi", "kernel_backend", "layernorm", "matmul", "mean_",
    "mul", "project", "reshape", "scale", "silu", "softmax", "sub", "sum_",
    "tensor", "transpose", "upsample2x", "zeros",
]
