from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .tensor import Parameter


class SGD:
    """SGD with momentum and L2 weight decay.

    Update per parameter: ``buf = momentum * buf + (g + wd * p)``; ``p -= lr * buf``.
    The momentum buffers are exposed in ``state`` so they can be checkpointed.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        sgd_step(self.params, self.lr if lr is None else lr, self.momentum, self.weight_decay, self.state)


def sgd_step(params, lr: float, momentum: float, weight_decay: float, state: Optional[dict] = None) -> None:
    """In-place SGD update of ``params``; gradients are zeroed afterwards."""
    state = {} if state is None else state
    params = [p for p in params if p.trainable]
    for p in params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            buf = state.get(p.name)
            if buf is None:
                buf = g.copy()
            else:
                buf = momentum * buf + g
            state[p.name] = buf
            g = buf
        if lr:
            p.data = (p.data - lr * g).astype(p.dtype, copy=False)
        p.grad = np.zeros_like(p.data)
