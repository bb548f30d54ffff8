"""Minimal module system: parameter registry, layers, and analytic tracing.

Every module can ``trace`` a per-sample input shape without touching data,
appending one :class:`CostRow` per parameterised layer. The cost analyser
and the ``shapes`` command are built on that path; ``forward`` is the other,
data-carrying path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .functional import ConvSpec
from .tensor import Tensor


@dataclass
class CostRow:
    name: str
    kind: str
    out_shape: tuple[int, ...]
    params: int
    macs: int


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, shape: tuple[int, ...], rows: list[CostRow], prefix: str) -> tuple[int, ...]:
        raise NotImplementedError(f"{type(self).__name__} cannot be traced")

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffer_names", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, bias: bool = False):
        self.spec = spec
        fan_in = spec.weight_shape[1] * int(np.prod(spec.kernel))
        self.weight = fan_in_uniform(rng, spec.weight_shape, fan_in)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return F.conv3d(x, self.weight, self.bias, s.stride, s.padding, s.groups)

    def trace(self, shape, rows, prefix):
        out = self.spec.output_shape(shape)
        rows.append(CostRow(prefix, "conv", out, self.spec.params(self.bias is not None),
                            self.spec.macs(shape)))
        return out


class BatchNorm3d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, zero_scale: bool = False):
        self.channels = channels
        self.scale = Tensor(np.zeros(channels) if zero_scale else np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=self.scale.dtype)
        self.running_var = np.ones(channels, dtype=self.scale.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.scale, self.shift, self.running_mean, self.running_var,
                           self.training)

    def trace(self, shape, rows, prefix):
        rows.append(CostRow(prefix, "batchnorm", tuple(shape), 2 * self.channels, 0))
        return tuple(shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = fan_in_uniform(rng, (d_out, d_in), d_in)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def trace(self, shape, rows, prefix):
        rows.append(CostRow(prefix, "fc", (self.d_out,),
                            self.d_in * self.d_out + (self.d_out if self.bias is not None else 0),
                            self.d_in * self.d_out))
        return (self.d_out,)
