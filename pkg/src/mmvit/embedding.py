"""Multiview patchification, separable positional encoding and the CLS token."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .nn import Conv2d, Module, _param, trunc_normal
from .tensor import Tensor


def derive_padding(kernel, stride) -> tuple:
    """Padding ``ceil((k - s) / 2)`` per axis.

    With this padding a length ``L`` divisible by ``s`` maps to exactly
    ``L / s`` outputs. Requires ``kernel > stride`` on every axis, and an odd
    kernel when the stride is 1 (an even kernel would need lopsided padding).
    """
    kernel, stride = F._pair(kernel), F._pair(stride)
    for k, s in zip(kernel, stride):
        if k <= s:
            raise ValueError(f"kernel {kernel} must exceed stride {stride} on every axis")
        if s == 1 and k % 2 == 0:
            raise ValueError(f"kernel {kernel} must be odd on axes with stride 1")
    return tuple(math.ceil((k - s) / 2) for k, s in zip(kernel, stride))


@dataclass(frozen=True)
class ViewSpec:
    """Patchifier geometry for one view; padding is derived, never configured."""

    kernel: tuple
    stride: tuple

    def __post_init__(self):
        object.__setattr__(self, "kernel", F._pair(self.kernel))
        object.__setattr__(self, "stride", F._pair(self.stride))

    @property
    def padding(self) -> tuple:
        return derive_padding(self.kernel, self.stride)

    def check(self) -> None:
        from .config import ConfigError

        if min(self.stride) < 1:
            raise ConfigError(f"view stride must be positive, got {self.stride}")
        try:
            derive_padding(self.kernel, self.stride)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def grid(self, h: int, w: int) -> tuple:
        return h // self.stride[0], w // self.stride[1]

    def format(self) -> str:
        kh, kw = self.kernel
        sh, sw = self.stride
        k = str(kh) if kh == kw else f"{kh}x{kw}"
        s = str(sh) if sh == sw else f"{sh}x{sw}"
        return f"{k}:{s}"

    @classmethod
    def parse(cls, text: str) -> "ViewSpec":
        """Parse ``"9:2"`` or ``"9x7:2x1"`` (kernel:stride)."""
        k, _, s = text.strip().partition(":")
        if not s:
            raise ValueError(f"view spec must be kernel:stride, got {text!r}")

        def axes(part):
            bits = part.split("x")
            return (int(bits[0]), int(bits[-1])) if len(bits) <= 2 else None

        kernel, stride = axes(k), axes(s)
        if kernel is None or stride is None:
            raise ValueError(f"bad view spec {text!r}")
        return cls(kernel, stride)


@dataclass
class ViewSet:
    """Per-view token sequences ``[B, L_i, E_i]`` and their spatial grids.

    View 0 carries the CLS token as its first row; no other view has one.
    """

    tokens: list
    grids: list
    has_cls: list = field(default_factory=list)

    def __post_init__(self):
        if not self.has_cls:
            self.has_cls = [i == 0 for i in range(len(self.tokens))]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def cls(self) -> Optional[Tensor]:
        return self.tokens[0][:, 0, :] if self.has_cls[0] else None

    def spatial_counts(self) -> list:
        return [h * w for h, w in self.grids]

    def channels(self) -> list:
        return [t.shape[-1] for t in self.tokens]


def patchify(x: Tensor, spec: ViewSpec, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Overlapping strided convolution producing ``[.., E, H/sh, W/sw]``."""
    h, w = x.shape[-2:]
    if h % spec.stride[0] or w % spec.stride[1]:
        raise ValueError(f"input {h}x{w} not divisible by view stride {spec.stride}")
    return F.conv2d(x, weight, bias, spec.stride, spec.padding)


class PositionalEncoding(Module):
    """Learnable separable table: ``pos(t, h, w) = row[:, h] + col[:, w] + time[:, t]``."""

    def __init__(self, dim: int, grid: tuple, rng: np.random.Generator, frames: int = 1):
        h, w = grid
        self.spatial_h = _param(trunc_normal(rng, (dim, h)))
        self.spatial_w = _param(trunc_normal(rng, (dim, w)))
        self.temporal = _param(trunc_normal(rng, (dim, frames)))

    def grid_encoding(self, t: int = 0) -> Tensor:
        """``[E, h, w]`` encoding for time index ``t``."""
        dim, h = self.spatial_h.shape
        w = self.spatial_w.shape[1]
        rows = F.reshape(self.spatial_h, (dim, h, 1))
        cols = F.reshape(self.spatial_w, (dim, 1, w))
        time = F.reshape(self.temporal[:, t], (dim, 1, 1))
        return rows + cols + time


class ViewEmbedding(Module):
    def __init__(self, in_channels: int, dim: int, spec: ViewSpec, grid: tuple, rng: np.random.Generator):
        self.spec = spec
        self.grid = grid
        self.patch = Conv2d(in_channels, dim, spec.kernel, spec.stride, spec.padding, rng)
        self.pos = PositionalEncoding(dim, grid, rng)

    def forward(self, x: Tensor) -> Tensor:
        """``[B, C, H, W]`` -> ``[B, h*w, E]`` tokens with positions added."""
        feat = patchify(x, self.spec, self.patch.weight, self.patch.bias)
        b, e, h, w = feat.shape
        if (h, w) != tuple(self.grid):
            raise ValueError(f"view grid {(h, w)} does not match configured {self.grid}")
        feat = feat + self.pos.grid_encoding()
        return F.transpose(F.reshape(feat, (b, e, h * w)), (0, 2, 1))


class MultiViewEmbedding(Module):
    """Builds the ViewSet fed to the first transformer block."""

    def __init__(self, input_shape: tuple, views, dim: int, rng: np.random.Generator):
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.views = [ViewEmbedding(c, dim, spec, spec.grid(h, w), rng) for spec in views]
        self.cls = _param(np.zeros(dim))
        self.cls_pos = _param(trunc_normal(rng, (dim,)))

    def forward(self, x: Tensor) -> ViewSet:
        if tuple(x.shape[1:]) != self.input_shape:
            from .config import ConfigError

            raise ConfigError(f"input shape {tuple(x.shape[1:])} does not match configured (C,H,W)={self.input_shape}")
        tokens = [view(x) for view in self.views]
        b, _, dim = tokens[0].shape
        cls = F.reshape(self.cls + self.cls_pos, (1, 1, dim))
        cls = F.mul(Tensor(np.ones((b, 1, 1), dtype=x.dtype)), cls)
        tokens[0] = F.concat([cls, tokens[0]], axis=1)
        return ViewSet(tokens, [view.grid for view in self.views])
