"""The MMViT network, its layer schedule, and shape/parameter/FLOP introspection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .attention import IDENTITY, Block, BlockKind, PoolingSpec
from .config import ConfigError, MMViTConfig
from .embedding import MultiViewEmbedding, ViewSet
from .functional import ShapeError
from .nn import LayerNorm, Linear, Module, _param, trunc_normal
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LayerPlan:
    index: int  # 1-based layer number
    kind: BlockKind
    stage: int  # 1-based stage number
    channels_in: int
    channels_out: int
    heads: int
    grids_in: tuple
    grids_out: tuple


def build_schedule(cfg: MMViTConfig) -> list:
    """Resolve the per-layer plan.

    Every stage but the last runs its self-attention blocks, then one cross
    block, then one scaled block that halves each grid axis and doubles the
    channels. The last stage holds only self-attention blocks.
    """
    cfg.validate()
    c, h, w = cfg.input
    grids = tuple(view.grid(h, w) for view in cfg.views)
    q_pool = PoolingSpec(cfg.q_pool_kernel, 2)
    plans = []
    index = 1
    for stage, count in enumerate(cfg.stage_self_counts):
        dim = cfg.stage_channels(stage)
        heads = cfg.heads[stage]
        kinds = [BlockKind.SELF] * count
        if stage < cfg.num_stages - 1:
            kinds += [BlockKind.CROSS, BlockKind.SCALED]
        for kind in kinds:
            if kind is BlockKind.SCALED:
                out_grids = tuple(q_pool.output_grid(g) for g in grids)
                out_dim = 2 * dim
            else:
                out_grids, out_dim = grids, dim
            plans.append(LayerPlan(index, kind, stage + 1, dim, out_dim, heads, grids, out_grids))
            grids = out_grids
            index += 1
    return plans


def stage_sizes(schedule: list) -> list:
    sizes: dict = {}
    for plan in schedule:
        sizes[plan.stage] = sizes.get(plan.stage, 0) + 1
    return [sizes[s] for s in sorted(sizes)]


def _kv_pool(cfg: MMViTConfig) -> PoolingSpec:
    if cfg.kv_pool_kernel == 1 and cfg.kv_pool_stride == 1:
        return IDENTITY
    return PoolingSpec(cfg.kv_pool_kernel, cfg.kv_pool_stride)


class MMViT(Module):
    """Multiscale multiview vision transformer classifier."""

    def __init__(self, cfg: MMViTConfig, rng: Optional[np.random.Generator] = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
        self.schedule = build_schedule(cfg)
        self.embed = MultiViewEmbedding(cfg.input, cfg.views, cfg.embed_dim, rng)
        kv_pool = _kv_pool(cfg)
        self.blocks = [
            Block(
                plan.kind,
                len(cfg.views),
                plan.channels_in,
                plan.heads,
                rng,
                q_pool_kernel=cfg.q_pool_kernel,
                kv_pool=kv_pool,
                mlp_ratio=cfg.mlp_ratio,
                dropout=cfg.dropout,
            )
            for plan in self.schedule
        ]
        final = self.schedule[-1].channels_out if self.schedule else cfg.embed_dim
        self.norm = LayerNorm(final)
        self.head = Linear(final, cfg.num_classes, rng)
        self.dropout_rng = np.random.default_rng(cfg.init_seed + 1)

    def reset_head(self, rng: np.random.Generator) -> None:
        dim = self.head.weight.shape[1]
        self.head.weight = _param(trunc_normal(rng, (self.cfg.num_classes, dim)))
        self.head.bias = _param(np.zeros(self.cfg.num_classes))

    def unreachable_parameters(self) -> set:
        """Names of parameters the logits cannot depend on.

        Only the CLS token of view 0 reaches the head, so the other views'
        towers after the last cross block never feed it. Inside that cross
        block only their keys and values still matter: their queries produce
        rows that are split off into the discarded view outputs.
        """
        crosses = [p.index for p in self.schedule if p.kind is BlockKind.CROSS]
        last_cross = crosses[-1] if crosses else 0
        after_attention = ("attn.q.", "attn.pool_q.", "attn.proj.", "norm2.", "mlp.", "shortcut.")
        dead = set()
        for plan, block in zip(self.schedule, self.blocks):
            if plan.index < last_cross:
                continue
            for v, tower in enumerate(block.towers):
                if not v:
                    continue
                for name, _ in tower.named_parameters():
                    if plan.index > last_cross or name.startswith(after_attention):
                        dead.add(f"blocks.{plan.index - 1}.towers.{v}.{name}")
        if not crosses:
            dead.update(f"embed.views.{v}.{n}" for v, view in enumerate(self.embed.views) if v for n, _ in view.named_parameters())
        return dead

    def features(self, x: Tensor) -> ViewSet:
        """Embedding plus every block; returns the final ViewSet."""
        views = self.embed(x)
        rng = self.dropout_rng if self.training and self.cfg.dropout > 0 else None
        for plan, block in zip(self.schedule, self.blocks):
            try:
                views = block(views, rng)
            except ShapeError as exc:
                raise ShapeError(f"layer {plan.index} ({plan.kind.value}): {exc}") from exc
        return views

    def forward(self, x) -> Tensor:
        """Logits ``[B, num_classes]`` for input ``[B, C, H, W]`` (or ``[num_classes]`` for ``[C, H, W]``)."""
        x = as_tensor(x)
        dtype = self.head.weight.dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype), requires_grad=x.requires_grad)
        unbatched = x.ndim == 3
        if unbatched:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input):
            raise ConfigError(f"input shape {tuple(x.shape)} does not match configured (C,H,W)={self.cfg.input}")
        views = self.features(x)
        cls = views.tokens[0][:, 0, :]
        logits = self.head(self.norm(cls))
        if unbatched:
            logits = F.reshape(logits, (self.cfg.num_classes,))
        return logits


# -- introspection ----------------------------------------------------------

def _tower_params(dim: int, dim_out: int, heads: int, q_pool: PoolingSpec, kv_pool: PoolingSpec, mlp_ratio: float) -> int:
    d = dim // heads
    hidden = int(dim * mlp_ratio)
    total = 2 * dim  # norm1
    total += 4 * (dim * dim + dim)  # q, k, v, proj
    for spec in (q_pool, kv_pool, kv_pool):
        if not spec.is_identity:
            total += d * spec.kernel[0] * spec.kernel[1] + d
    total += 2 * dim  # norm2
    total += dim * hidden + hidden + hidden * dim_out + dim_out
    if dim_out != dim:
        total += dim * dim_out + dim_out
    return total


def count_params(cfg: MMViTConfig) -> int:
    """Exact parameter count derived from shapes alone (no model is built)."""
    return sum(layer_params(cfg).values())


def layer_params(cfg: MMViTConfig) -> dict:
    """Parameter counts keyed by ``"embed"``, layer index, and ``"head"``."""
    schedule = build_schedule(cfg)
    c, h, w = cfg.input
    e = cfg.embed_dim
    out: dict = {}
    embed = 2 * e  # cls + cls_pos
    for view in cfg.views:
        gh, gw = view.grid(h, w)
        embed += e * c * view.kernel[0] * view.kernel[1] + e
        embed += e * gh + e * gw + e
    out["embed"] = embed
    kv_pool = _kv_pool(cfg)
    for plan in schedule:
        q_pool = PoolingSpec(cfg.q_pool_kernel, 2) if plan.kind is BlockKind.SCALED else IDENTITY
        kv = IDENTITY if plan.kind is BlockKind.CROSS else kv_pool
        per_view = _tower_params(plan.channels_in, plan.channels_out, plan.heads, q_pool, kv, cfg.mlp_ratio)
        out[plan.index] = per_view * len(cfg.views)
    final = schedule[-1].channels_out if schedule else e
    out["head"] = 2 * final + final * cfg.num_classes + cfg.num_classes
    return out


def layer_flops(cfg: MMViTConfig) -> dict:
    """FLOPs (2 x multiply-adds) of linear, conv and attention products per input."""
    schedule = build_schedule(cfg)
    c, h, w = cfg.input
    e = cfg.embed_dim
    out: dict = {}
    embed = 0
    for view in cfg.views:
        gh, gw = view.grid(h, w)
        embed += 2 * gh * gw * e * c * view.kernel[0] * view.kernel[1]
    out["embed"] = embed
    kv_pool = _kv_pool(cfg)
    for plan in schedule:
        dim, dim_out, heads = plan.channels_in, plan.channels_out, plan.heads
        d = dim // heads
        hidden = int(dim * cfg.mlp_ratio)
        q_pool = PoolingSpec(cfg.q_pool_kernel, 2) if plan.kind is BlockKind.SCALED else IDENTITY
        kv = IDENTITY if plan.kind is BlockKind.CROSS else kv_pool
        total = 0
        q_lens, k_lens = [], []
        for v, grid in enumerate(plan.grids_in):
            cls = 1 if v == 0 else 0
            n = grid[0] * grid[1] + cls
            total += 3 * 2 * n * dim * dim  # q, k, v projections
            qg = q_pool.output_grid(grid)
            kg = kv.output_grid(grid)
            for spec, g in ((q_pool, qg), (kv, kg), (kv, kg)):
                if not spec.is_identity:
                    total += 2 * g[0] * g[1] * dim * spec.kernel[0] * spec.kernel[1]
            nq = qg[0] * qg[1] + cls
            nk = kg[0] * kg[1] + cls
            q_lens.append(nq)
            k_lens.append(nk)
            total += 2 * nq * dim * dim  # output projection
            total += 2 * nq * (dim * hidden + hidden * dim_out)
            if dim_out != dim:
                total += 2 * nq * dim * dim_out
        if plan.kind is BlockKind.CROSS:
            lq, lk = sum(q_lens), sum(k_lens)
            total += 2 * 2 * lq * lk * d * heads
        else:
            total += sum(2 * 2 * nq * nk * d * heads for nq, nk in zip(q_lens, k_lens))
        out[plan.index] = total
    final = schedule[-1].channels_out if schedule else e
    out["head"] = 2 * final * cfg.num_classes
    return out


def estimate_flops(cfg: MMViTConfig) -> int:
    return sum(layer_flops(cfg).values())


def describe_schedule(cfg: MMViTConfig) -> str:
    """Human-readable table of the schedule with params and FLOPs columns."""
    schedule = build_schedule(cfg)
    params = layer_params(cfg)
    flops = layer_flops(cfg)
    header = f"{'layer':>5}  {'stage':>5}  {'kind':<6}  {'channels':>10}  {'heads':>5}  {'grids out':<24}  {'params':>12}  {'FLOPs':>16}"
    lines = [header, "-" * len(header)]
    lines.append(f"{'-':>5}  {'-':>5}  {'embed':<6}  {cfg.embed_dim:>10}  {'-':>5}  {_grids(_embed_grids(cfg)):<24}  {params['embed']:>12,}  {flops['embed']:>16,}")
    for plan in schedule:
        chans = f"{plan.channels_in}->{plan.channels_out}" if plan.channels_in != plan.channels_out else str(plan.channels_in)
        lines.append(
            f"{plan.index:>5}  {plan.stage:>5}  {plan.kind.value:<6}  {chans:>10}  {plan.heads:>5}  "
            f"{_grids(plan.grids_out):<24}  {params[plan.index]:>12,}  {flops[plan.index]:>16,}"
        )
    lines.append(f"{'-':>5}  {'-':>5}  {'head':<6}  {cfg.num_classes:>10}  {'-':>5}  {'cls':<24}  {params['head']:>12,}  {flops['head']:>16,}")
    lines.append(
        f"layers={len(schedule)} stages={'/'.join(str(s) for s in stage_sizes(schedule))} "
        f"params={count_params(cfg):,} flops={estimate_flops(cfg):,}"
    )
    return "\n".join(lines)


def _embed_grids(cfg: MMViTConfig) -> tuple:
    _, h, w = cfg.input
    return tuple(v.grid(h, w) for v in cfg.views)


def _grids(grids) -> str:
    return " ".join(f"{a}x{b}" for a, b in grids)
