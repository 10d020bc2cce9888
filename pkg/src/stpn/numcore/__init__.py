"""Deterministic float64 tensor kernels, reverse-mode autodiff and helpers."""
from .autodiff import Graph, Node, backward
from .gradcheck import autodiff_grads, finite_diff_check, finite_diff_errors
from .ops import (concat, cross_entropy, gelu, layer_norm, matmul, mean_over_axis,
                  pad, reshape, softmax, stack, swap_last, take, total, transpose, value)
from .optim import AdamState, adam_step
from .rng import Rng
from .serialize import read_archive, read_tensor, write_archive, write_tensor

__all__ = [
    "Graph", "Node", "backward", "autodiff_grads", "finite_diff_check", "finite_diff_errors",
    "concat", "cross_entropy", "gelu", "layer_norm", "matmul", "mean_over_axis", "pad",
    "reshape", "softmax", "stack", "swap_last", "take", "total", "transpose", "value",
    "AdamState", "adam_step", "Rng", "read_archive", "read_tensor", "write_archive", "write_tensor",
]
