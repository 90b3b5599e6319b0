"""Parameter containers.

Modules register child modules and parameters through attribute assignment,
in insertion order, so parameter names are stable dotted paths such as
``mask_heads.2.convs.1.weight``.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, m in self._modules.items():
            yield from m.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        """Stamp each parameter with its dotted path."""
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def clear_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype, gain: float = 1.0) -> np.ndarray:
    """Variance ``2 gain^2 / fan_in``; ``gain=sqrt(0.5)`` suits layers not followed by a ReLU."""
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None, dtype=np.float32, gain: float = 1.0, init_std: Optional[float] = None):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (out_ch, in_ch, k, k)
        if init_std is None:
            w = kaiming_uniform(rng, shape, in_ch * k * k, dtype, gain)
        else:
            w = (rng.standard_normal(shape) * init_std).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Deconv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 2, dtype=np.float32):
        super().__init__()
        self.stride = stride
        k = 2 * stride
        # fan-in of a transposed conv output pixel: in_ch * (k/stride)^2
        self.weight = Parameter(kaiming_uniform(rng, (in_ch, out_ch, k, k), in_ch * (k // stride) ** 2, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.deconv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, init_std: Optional[float] = None, dtype=np.float32, gain: float = 1.0):
        super().__init__()
        if init_std is None:
            w = kaiming_uniform(rng, (out_f, in_f), in_f, dtype, gain)
        else:
            w = (rng.standard_normal((out_f, in_f)) * init_std).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_f, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
