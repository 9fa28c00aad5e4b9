"""Sparse voxel tensors, reverse-mode differentiation and the layers built on them."""

from . import checkpoint, ops
from .autograd import Tape, Variable, backward, current_tape, no_grad
from .gradcheck import check_gradients, numeric_grad, relative_error
from .layers import (BatchNorm, Conv, Linear, Module, SConvBlock, SInceptionResNet,
                     TransposedConv)
from .ops import (ConvKernel, ConvRecord, add, batch_norm, bce, bce_with_logits, concat,
                  count_flops, matmul, relu, sigmoid, sparse_conv, ste_round, take_cols,
                  take_rows, total, trace_flops, transposed_sparse_conv)
from .optim import Adam, AdamState, adam_step, step_decay
from .tensor import CHILD_OFFSETS, CoordSet, SparseTensor, kernel_offsets

__all__ = [
    "checkpoint", "ops", "Tape", "Variable", "backward", "current_tape", "no_grad",
    "check_gradients", "numeric_grad", "relative_error", "BatchNorm", "Conv", "Linear",
    "Module", "SConvBlock", "SInceptionResNet", "TransposedConv", "ConvKernel", "ConvRecord",
    "add", "batch_norm", "bce", "bce_with_logits", "concat", "count_flops", "matmul", "relu",
    "sigmoid", "sparse_conv", "ste_round", "take_cols", "take_rows", "total", "trace_flops",
    "transposed_sparse_conv", "Adam", "AdamState", "adam_step", "step_decay", "CHILD_OFFSETS",
    "CoordSet", "SparseTensor", "kernel_offsets",
]
