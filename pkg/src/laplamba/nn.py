"""Module containers and the basic parameterised layers."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that is always trainable."""

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Base class; parameters and submodules are discovered from attributes.

    Discovery follows attribute assignment order, so parameter names and their
    order are deterministic for a given construction sequence.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (float32 is meant for inference only)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class ModuleList(Module):
    def __init__(self, items=()):
        self._items: list = []
        for item in items:
            self.append(item)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Identity(Module):
    def forward(self, x):
        return x


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int,
        groups: int = 1,
        bias: bool = True,
        dilation: int = 1,
        padding_mode: str = "zeros",
    ):
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide {in_ch} and {out_ch}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.groups, self.dilation, self.padding_mode = groups, dilation, padding_mode
        fan_in = in_ch // groups * kernel * kernel
        self.weight = Parameter(uniform_init(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_ch,), fan_in)) if bias else None

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias, padding=self.padding, dilation=self.dilation,
            groups=self.groups, padding_mode=self.padding_mode,
        )

    def macs(self, n: int, h: int, w: int) -> int:
        return n * self.out_ch * h * w * (self.in_ch // self.groups) * self.kernel ** 2


class Linear(Module):
    """Dense map along one axis (channel axis 1 by default for NCHW maps)."""

    def __init__(self, rng, in_dim: int, out_dim: int, bias: bool = True, axis: int = 1):
        self.in_dim, self.out_dim, self.axis = in_dim, out_dim, axis
        self.weight = Parameter(uniform_init(rng, (out_dim, in_dim), in_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias, axis=self.axis)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, axis: int = 1):
        self.eps, self.axis = eps, axis
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps, axis=self.axis)


def scalar_parameter(value: float) -> Parameter:
    return Parameter(np.asarray(value, dtype=np.float64))


def maybe(module: Optional[Module], x):
    return x if module is None else module(x)
