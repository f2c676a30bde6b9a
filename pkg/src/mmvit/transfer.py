"""Adapt a checkpoint trained on one input geometry (e.g. RGB images) to another (e.g. mono spectrograms).

Block weights do not depend on the input size, so they are copied. What
does depend on it:

* patchifier kernels: 3 input channels are averaged down to 1;
* positional tables: each axis is resampled linearly to the new grid extent
  (the CLS position is reused verbatim);
* the classification head: re-initialised when the label space changes.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import MMViTConfig
from .nn import trunc_normal

log = logging.getLogger(__name__)

# fields whose disagreement makes block shapes incompatible
ARCHITECTURE_FIELDS = (
    "embed_dim",
    "stage_self_counts",
    "heads",
    "mlp_ratio",
    "q_pool_kernel",
    "kv_pool_kernel",
    "kv_pool_stride",
)

_POS_TABLE = re.compile(r"^embed\.views\.(\d+)\.pos\.(spatial_h|spatial_w|temporal)$")
_PATCH_WEIGHT = re.compile(r"^embed\.views\.(\d+)\.patch\.weight$")
HEAD_PARAMS = ("head.weight", "head.bias")


class TransferError(ValueError):
    """Source and target configurations cannot be bridged."""


class Action(enum.Enum):
    COPY = "Copy"
    CHANNEL_AVERAGE = "ChannelAverage"
    INTERPOLATE = "Interpolate"
    REINITIALIZE = "Reinitialize"
    DROP = "Drop"


@dataclass
class TransferPlan:
    source_fingerprint: int
    target: MMViTConfig
    actions: dict = field(default_factory=dict)  # name -> (Action, detail)

    def count(self, action: Action) -> int:
        return sum(1 for a, _ in self.actions.values() if a is action)

    def names(self, action: Action) -> list:
        return [n for n, (a, _) in self.actions.items() if a is action]

    def audit_log(self) -> str:
        lines = [f"source fingerprint {self.source_fingerprint:#018x} -> target fingerprint {self.target.fingerprint():#018x}"]
        for name, (action, detail) in self.actions.items():
            lines.append(f"{action.value:<15} {name}" + (f"  ({detail})" if detail else ""))
        totals = ", ".join(f"{a.value}={self.count(a)}" for a in Action)
        lines.append(f"totals: {totals}")
        return "\n".join(lines)


def channel_average(weight: np.ndarray) -> np.ndarray:
    """Average a ``[E, 3, kh, kw]`` kernel over its input channels to ``[E, 1, kh, kw]``."""
    weight = np.asarray(weight)
    if weight.ndim != 4 or weight.shape[1] != 3:
        raise TransferError(f"channel averaging needs a [E, 3, kh, kw] kernel, got {weight.shape}")
    return weight.mean(axis=1, keepdims=True)


def resample_axis(table: np.ndarray, size: int, axis: int = -1) -> np.ndarray:
    """Corner-aligned linear resampling of one axis.

    Uses ``np.interp`` so constant rows stay exactly constant and both end
    points are reproduced exactly.
    """
    table = np.asarray(table, dtype=np.float64)
    src = table.shape[axis]
    if size < 1:
        raise TransferError(f"target extent must be positive, got {size}")
    if src == size:
        return table.copy()
    if src == 1:
        return np.repeat(table, size, axis=axis)
    if size == 1:
        return np.take(table, [0], axis=axis)
    xs = np.linspace(0.0, src - 1, size)
    xp = np.arange(src, dtype=np.float64)
    return np.apply_along_axis(lambda row: np.interp(xs, xp, row), axis, table)


def interpolate_posenc(tables: dict, dst_grid: tuple, dst_frames: int = 1) -> dict:
    """Resample a view's positional tables to a new grid.

    Args:
        tables: ``{"spatial_h": [E, h], "spatial_w": [E, w], "temporal": [E, t]}``.
        dst_grid: target ``(h, w)``.
        dst_frames: target temporal extent.

    Returns:
        New dict with the same keys. Tables already at the target size are
        returned as bit-identical copies.
    """
    targets = {"spatial_h": dst_grid[0], "spatial_w": dst_grid[1], "temporal": dst_frames}
    out = {}
    for key, table in tables.items():
        table = np.asarray(table)
        if table.shape[-1] == targets[key]:
            out[key] = table.copy()
        else:
            out[key] = resample_axis(table, targets[key], axis=-1).astype(table.dtype)
    return out


def check_compatible(src: MMViTConfig, dst: MMViTConfig) -> None:
    """Raise :class:`TransferError` naming every architecture field that differs."""
    diverged = [
        f"model.{name}: {getattr(src, name)!r} vs {getattr(dst, name)!r}"
        for name in ARCHITECTURE_FIELDS
        if getattr(src, name) != getattr(dst, name)
    ]
    if len(src.views) != len(dst.views):
        diverged.append(f"model.views: {len(src.views)} views vs {len(dst.views)}")
    else:
        for i, (a, b) in enumerate(zip(src.views, dst.views)):
            if a.kernel != b.kernel:
                diverged.append(f"model.views[{i}].kernel: {a.kernel} vs {b.kernel}")
    c_src, c_dst = src.input[0], dst.input[0]
    if c_src != c_dst and not (c_src == 3 and c_dst == 1):
        diverged.append(f"model.input channels: {c_src} vs {c_dst} (only equal counts or 3 -> 1 are supported)")
    if diverged:
        raise TransferError("architecture mismatch: " + "; ".join(diverged))


def _target_shapes(dst: MMViTConfig) -> dict:
    from .model import MMViT

    # shapes only; building the tiny graph of numpy arrays is cheap next to a checkpoint
    return {name: p.shape for name, p in MMViT(dst, np.random.default_rng(0)).named_parameters()}


def apply_transfer(
    src_params: dict,
    src_cfg: MMViTConfig,
    dst_cfg: MMViTConfig,
    rng: Optional[np.random.Generator] = None,
    reinit_head: Optional[bool] = None,
    source_fingerprint: Optional[int] = None,
) -> tuple:
    """Map ``src_params`` onto the parameter set of ``dst_cfg``.

    The head is re-initialised (truncated normal, std 0.02, zero bias) when
    ``reinit_head`` is true, or, by default, when the class count or task
    differs. Returns ``(params, plan)``; every target parameter gets exactly
    one action and source tensors with no target are marked ``Drop``.
    """
    check_compatible(src_cfg, dst_cfg)
    rng = rng if rng is not None else np.random.default_rng(dst_cfg.init_seed)
    if reinit_head is None:
        reinit_head = src_cfg.num_classes != dst_cfg.num_classes or src_cfg.task != dst_cfg.task
    shapes = _target_shapes(dst_cfg)
    missing = sorted(set(shapes) - set(src_params))
    if missing and not (reinit_head and set(missing) <= set(HEAD_PARAMS)):
        raise TransferError(f"source checkpoint lacks {len(missing)} target tensors, e.g. {missing[:3]}")
    _, h, w = dst_cfg.input
    dst_grids = [v.grid(h, w) for v in dst_cfg.views]
    plan = TransferPlan(source_fingerprint if source_fingerprint is not None else src_cfg.fingerprint(), dst_cfg)
    out = {}
    for name, shape in shapes.items():
        if name in HEAD_PARAMS and reinit_head:
            value = trunc_normal(rng, shape) if name == "head.weight" else np.zeros(shape)
            plan.actions[name] = (Action.REINITIALIZE, "trunc normal std 0.02" if name == "head.weight" else "zeros")
            out[name] = value.astype(np.float32)
            continue
        value = np.asarray(src_params[name])
        pos = _POS_TABLE.match(name)
        if _PATCH_WEIGHT.match(name) and value.shape[1] != shape[1]:
            out[name] = channel_average(value).astype(np.float32)
            plan.actions[name] = (Action.CHANNEL_AVERAGE, f"{value.shape[1]} -> {shape[1]} channels")
        elif pos and value.shape != shape:
            view = int(pos.group(1))
            key = pos.group(2)
            size = {"spatial_h": dst_grids[view][0], "spatial_w": dst_grids[view][1], "temporal": shape[-1]}[key]
            out[name] = resample_axis(value, size).astype(np.float32)
            plan.actions[name] = (Action.INTERPOLATE, f"{value.shape[-1]} -> {size}")
        else:
            if value.shape != shape:
                raise TransferError(f"{name}: source shape {value.shape} cannot be copied into {shape}")
            out[name] = value.astype(np.float32, copy=True)
            plan.actions[name] = (Action.COPY, "")
        if out[name].shape != shape:
            raise TransferError(f"{name}: produced {out[name].shape}, target needs {shape}")
    for name in src_params:
        if name not in shapes:
            plan.actions[name] = (Action.DROP, "no counterpart in target")
    for name, (action, detail) in plan.actions.items():
        if action is not Action.COPY:
            log.info("transfer %s %s %s", action.value, name, detail)
    return out, plan


def transfer_config(src_cfg: MMViTConfig, **changes) -> MMViTConfig:
    """Convenience: ``dataclasses.replace`` with validation."""
    return dataclasses.replace(src_cfg, **changes).validate()
