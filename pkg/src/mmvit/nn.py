"""Minimal module system: parameter registration, naming and initialisation."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Base class. Parameters are Tensor attributes with ``requires_grad``;
    children are Module attributes or lists of Modules."""

    training: bool = True

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match parameter {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float32 <-> float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(get_default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(trunc_normal(rng, (out_features, in_features)))
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gain, self.shift, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride,
        padding,
        rng: np.random.Generator,
        depthwise: bool = False,
        init: str = "trunc_normal",
    ):
        kh, kw = F._pair(kernel)
        self.kernel = (kh, kw)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        self.groups = in_channels if depthwise else 1
        cin = 1 if depthwise else in_channels
        shape = (out_channels, cin, kh, kw)
        if init == "trunc_normal":
            w = trunc_normal(rng, shape)
        else:
            bound = 1.0 / np.sqrt(cin * kh * kw)
            w = rng.uniform(-bound, bound, shape)
        self.weight = _param(w)
        self.bias = _param(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Mlp(Module):
    """Two linear layers with a GELU between them."""

    def __init__(self, dim: int, hidden: int, out: int, rng: np.random.Generator, dropout: float = 0.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out, rng)
        self.dropout = dropout

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = F.gelu(self.fc1(x))
        if self.training and self.dropout > 0 and rng is not None:
            h = F.dropout(h, self.dropout, rng)
        return self.fc2(h)
