"""Minimal numpy autograd kernel used by every model component."""

from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Conv2d, Deconv2d, Linear, Module, ModuleList
from .ops import (
    add,
    add_n,
    bilinear_resize,
    binary_cross_entropy_loss,
    concat,
    conv2d,
    cross_entropy_loss,
    deconv2d,
    elementwise_add,
    flatten,
    index_rows,
    linear,
    maxpool2d,
    mul,
    relu,
    reshape,
    sigmoid,
    smooth_l1_loss,
    softmax,
    sum_all,
    take_channel,
)
from .optim import SGD, sgd_step
from .tensor import Parameter, Tensor, is_grad_enabled, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
