"""Parameters, modules and the small layers the network is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable


class Module:
    """Attribute-registered parameter tree, in the spirit of ``torch.nn.Module``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            p.name = name
            out[name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()])) if self.parameters() else 0

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Init:
    """Weight initialisation: Kaiming-uniform, or a fixture constant for analytic tests."""

    def __init__(self, rng: np.random.Generator | int | None = 0, constant: float | None = None):
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.constant = constant

    def weight(self, shape, fan_in: int) -> Parameter:
        dtype = T.get_default_dtype()
        if self.constant is not None:
            return Parameter(np.full(shape, self.constant, dtype=dtype))
        bound = np.sqrt(6.0 / fan_in)
        return Parameter(self.rng.uniform(-bound, bound, size=shape).astype(dtype))

    def bias(self, n: int) -> Parameter:
        return Parameter(np.zeros(n, dtype=T.get_default_dtype()))

    def fill(self, shape, value: float) -> Parameter:
        return Parameter(np.full(shape, value, dtype=T.get_default_dtype()))


class Conv2d(Module):
    def __init__(self, init: Init, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True):
        if c_in % groups or c_out % groups:
            raise T.ShapeError(f"conv {c_in}->{c_out} not divisible by groups={groups}")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.weight = init.weight((c_out, c_in // groups, k, k), fan_in=(c_in // groups) * k * k)
        self.bias = init.bias(c_out) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    """Acts on the last axis: ``(..., d_in) -> (..., d_out)``."""

    def __init__(self, init: Init, d_in: int, d_out: int, bias: bool = True):
        self.weight = init.weight((d_in, d_out), fan_in=d_in)
        self.bias = init.bias(d_out) if bias else None

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim == 1:
            return T.reshape(self.forward(T.reshape(x, (1, -1))), (-1,))
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    def __init__(self, init: Init, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(init, d_in, d_hidden)
        self.fc2 = Linear(init, d_hidden, d_out)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class TokenMLP(Module):
    """Rearrange ``c h w`` into tokens, apply an MLP over channels, rearrange back."""

    def __init__(self, init: Init, d_in: int, d_hidden: int, d_out: int):
        self.mlp = MLP(init, d_in, d_hidden, d_out)

    def forward(self, x):
        h, w = x.shape[-2:]
        lead = "n " if x.ndim == 4 else ""
        tokens = T.rearrange(x, f"{lead}c h w -> {lead}(h w) c")
        y = self.mlp(tokens)
        return T.rearrange(y, f"{lead}(h w) c -> {lead}c h w", h=h, w=w)


class ConcatConv(Module):
    """Concat along channels then a 3x3 conv (the CC operator)."""

    def __init__(self, init: Init, c_ins, c_out: int, k: int = 3):
        self.conv = Conv2d(init, int(np.sum(c_ins)), c_out, k)

    def forward(self, *xs):
        return self.conv(T.concat(xs, axis=-3))
