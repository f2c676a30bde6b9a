"""Pooling attention, cross-view pooling attention and the three block kinds.

Tokens travel as ``[B, L, E]`` tensors. A view's spatial tokens are its grid
``(h, w)`` flattened row-major; view 0 additionally carries a leading CLS
row that is projected but never pooled.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .embedding import ViewSet, derive_padding
from .functional import ShapeError
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module
from .tensor import Tensor


class BlockKind(enum.Enum):
    SELF = "self"
    CROSS = "cross"
    SCALED = "scaled"


@dataclass(frozen=True)
class PoolingSpec:
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", F._pair(self.kernel))
        object.__setattr__(self, "stride", F._pair(self.stride))
        if min(self.stride) < 1:
            raise ValueError(f"pooling stride must be >= 1, got {self.stride}")
        if not self.is_identity:
            derive_padding(self.kernel, self.stride)

    @property
    def is_identity(self) -> bool:
        return self.kernel == (1, 1) and self.stride == (1, 1)

    @property
    def padding(self) -> tuple:
        if self.is_identity:
            return (0, 0)
        return derive_padding(self.kernel, self.stride)

    def output_grid(self, grid: tuple) -> tuple:
        return tuple(F.conv_output_size(n, k, s, p) for n, k, s, p in zip(grid, self.kernel, self.stride, self.padding))


IDENTITY = PoolingSpec()


def _check_tokens(x: Tensor, grid: tuple, has_cls: bool, where: str = "") -> None:
    expected = grid[0] * grid[1] + int(has_cls)
    if x.shape[1] != expected:
        raise ShapeError(f"{where}token count {x.shape[1]} inconsistent with grid {tuple(grid)} (cls={has_cls})")


def pool_tokens(t: Tensor, grid: tuple, has_cls: bool, conv: Optional[Conv2d], spec: PoolingSpec) -> tuple:
    """Pool ``[B, heads, L, d]`` over the spatial grid; the CLS row bypasses pooling."""
    if conv is None or spec.is_identity:
        return t, tuple(grid)
    b, heads, _, d = t.shape
    h, w = grid
    if has_cls:
        cls, rest = F.split(t, [1, h * w], axis=2)
    else:
        cls, rest = None, t
    rest = F.reshape(rest, (b * heads, h, w, d))
    rest = F.transpose(rest, (0, 3, 1, 2))
    rest = conv(rest)
    _, _, ho, wo = rest.shape
    rest = F.reshape(F.transpose(rest, (0, 2, 3, 1)), (b, heads, ho * wo, d))
    if cls is not None:
        rest = F.concat([cls, rest], axis=2)
    return rest, (ho, wo)


def pool_residual(x: Tensor, grid: tuple, has_cls: bool, spec: PoolingSpec) -> Tensor:
    """Average-pool ``[B, L, E]`` tokens with ``spec``'s geometry (CLS untouched)."""
    if spec.is_identity:
        return x
    b, _, e = x.shape
    h, w = grid
    if has_cls:
        cls, rest = F.split(x, [1, h * w], axis=1)
    else:
        cls, rest = None, x
    rest = F.transpose(F.reshape(rest, (b, h, w, e)), (0, 3, 1, 2))
    rest = F.avg_pool2d(rest, spec.kernel, spec.stride, spec.padding)
    _, _, ho, wo = rest.shape
    rest = F.reshape(F.transpose(rest, (0, 2, 3, 1)), (b, ho * wo, e))
    return F.concat([cls, rest], axis=1) if cls is not None else rest


class PoolingAttention(Module):
    """Multi-head pooling attention for one view.

    Q, K and V come from separate linear layers and are each pooled by their
    own depthwise convolution (shared across heads, as in MViT). Identity
    pooling specs create no convolution.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        q_pool: PoolingSpec = IDENTITY,
        k_pool: PoolingSpec = IDENTITY,
        v_pool: PoolingSpec = IDENTITY,
    ):
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.specs = (q_pool, k_pool, v_pool)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        d = self.head_dim
        self.pool_q, self.pool_k, self.pool_v = (
            None if s.is_identity else Conv2d(d, d, s.kernel, s.stride, s.padding, rng, depthwise=True, init="uniform")
            for s in self.specs
        )
        self.proj = Linear(dim, dim, rng)

    def _heads(self, t: Tensor) -> Tensor:
        b, length, _ = t.shape
        return F.transpose(F.reshape(t, (b, length, self.heads, self.head_dim)), (0, 2, 1, 3))

    def project(self, x: Tensor, grid: tuple, has_cls: bool) -> tuple:
        """Return pooled ``(Q, K, V)`` as ``[B, heads, L', d]`` plus the pooled Q grid."""
        _check_tokens(x, grid, has_cls)
        q, q_grid = pool_tokens(self._heads(self.q(x)), grid, has_cls, self.pool_q, self.specs[0])
        k, _ = pool_tokens(self._heads(self.k(x)), grid, has_cls, self.pool_k, self.specs[1])
        v, _ = pool_tokens(self._heads(self.v(x)), grid, has_cls, self.pool_v, self.specs[2])
        return q, k, v, q_grid

    def merge(self, out: Tensor) -> Tensor:
        """``[B, heads, L, d]`` -> output projection of ``[B, L, E]``."""
        b, _, length, _ = out.shape
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (b, length, self.dim))
        return self.proj(out)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def forward(self, x: Tensor, grid: tuple, has_cls: bool) -> tuple:
        q, k, v, q_grid = self.project(x, grid, has_cls)
        return self.merge(F.attention(q, k, v, self.scale)), q_grid


def pooling_attention(x: Tensor, attn: PoolingAttention, grid: tuple, has_cls: bool) -> tuple:
    """Apply ``attn`` to one view; returns ``(tokens, pooled grid)``."""
    return attn(x, grid, has_cls)


def cross_pooling_attention(
    attns: Sequence[PoolingAttention], xs: Sequence[Tensor], grids: Sequence[tuple], has_cls: Sequence[bool]
) -> tuple:
    """Joint attention over the token-axis concatenation of every view.

    Each view contributes its own pooled Q, K, V; a single softmax runs over
    all concatenated keys, and the result is split back by each view's
    pooled-Q length before the per-view output projection.
    """
    if not attns:
        raise ValueError("cross attention needs at least one view")
    heads, head_dim = attns[0].heads, attns[0].head_dim
    for i, a in enumerate(attns):
        if (a.heads, a.head_dim) != (heads, head_dim):
            from .config import ConfigError

            raise ConfigError(f"view {i} has heads/head_dim {(a.heads, a.head_dim)}, expected {(heads, head_dim)}")
    qs, ks, vs, q_grids = [], [], [], []
    for a, x, grid, cls in zip(attns, xs, grids, has_cls):
        q, k, v, q_grid = a.project(x, grid, cls)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        q_grids.append(q_grid)
    lengths = [q.shape[2] for q in qs]
    if len(attns) == 1:
        joint = F.attention(qs[0], ks[0], vs[0], attns[0].scale)
        pieces = [joint]
    else:
        joint = F.attention(F.concat(qs, axis=2), F.concat(ks, axis=2), F.concat(vs, axis=2), attns[0].scale)
        pieces = F.split(joint, lengths, axis=2)
    return [a.merge(p) for a, p in zip(attns, pieces)], q_grids


class ViewTower(Module):
    """Per-view parameters of one block: attention, MLP, norms and shortcut."""

    def __init__(
        self,
        dim: int,
        dim_out: int,
        heads: int,
        rng: np.random.Generator,
        q_pool: PoolingSpec = IDENTITY,
        kv_pool: PoolingSpec = IDENTITY,
        mlp_ratio: float = 4.0,
        dropout: float = 0.0,
    ):
        self.norm1 = LayerNorm(dim)
        self.attn = PoolingAttention(dim, heads, rng, q_pool, kv_pool, kv_pool)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim_out, rng, dropout)
        self.shortcut = Linear(dim, dim_out, rng) if dim_out != dim else None
        self.residual_pool = q_pool

    def finish(self, x: Tensor, attn_out: Tensor, grid: tuple, has_cls: bool, rng=None) -> Tensor:
        """Residual wiring after the attention output is known."""
        y = pool_residual(x, grid, has_cls, self.residual_pool) + attn_out
        ny = self.norm2(y)
        skip = self.shortcut(ny) if self.shortcut is not None else y
        return skip + self.mlp(ny, rng)


class Block(Module):
    """One layer: a tower per view, wired as self, cross or scaled attention."""

    def __init__(
        self,
        kind: BlockKind,
        num_views: int,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        q_pool_kernel: int = 3,
        kv_pool: PoolingSpec = IDENTITY,
        mlp_ratio: float = 4.0,
        dropout: float = 0.0,
    ):
        self.kind = kind
        dim_out = 2 * dim if kind is BlockKind.SCALED else dim
        if kind is BlockKind.SCALED:
            q_pool = PoolingSpec(q_pool_kernel, 2)
        else:
            q_pool = IDENTITY
        if kind is BlockKind.CROSS:
            kv_pool = IDENTITY
        self.towers = [
            ViewTower(dim, dim_out, heads, rng, q_pool, kv_pool, mlp_ratio, dropout) for _ in range(num_views)
        ]

    def forward(self, views: ViewSet, rng: Optional[np.random.Generator] = None) -> ViewSet:
        if len(views) != len(self.towers):
            raise ShapeError(f"block expects {len(self.towers)} views, got {len(views)}")
        normed = [t.norm1(x) for t, x in zip(self.towers, views.tokens)]
        if self.kind is BlockKind.CROSS:
            attn_outs, grids = cross_pooling_attention(
                [t.attn for t in self.towers], normed, views.grids, views.has_cls
            )
        else:
            attn_outs, grids = [], []
            for t, x, grid, cls in zip(self.towers, normed, views.grids, views.has_cls):
                out, g = t.attn(x, grid, cls)
                attn_outs.append(out)
                grids.append(g)
        tokens = [
            t.finish(x, a, grid, cls, rng)
            for t, x, a, grid, cls in zip(self.towers, views.tokens, attn_outs, views.grids, views.has_cls)
        ]
        return ViewSet(tokens, grids, list(views.has_cls))
