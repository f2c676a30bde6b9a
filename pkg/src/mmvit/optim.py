"""AdamW with decoupled weight decay, plus gradient clipping and the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """A parameter reached the optimiser without a gradient."""


@dataclass
class OptimizerState:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        """Flatten into named arrays for checkpointing."""
        out = {"step": np.array([self.step], dtype=np.float64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_arrays(self, arrays: dict) -> None:
        self.step = int(round(float(np.asarray(arrays["step"]).ravel()[0])))
        self.m = {k[2:]: np.asarray(a, dtype=np.float64) for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: np.asarray(a, dtype=np.float64) for k, a in arrays.items() if k.startswith("v.")}


def adamw_step(params: dict, state: OptimizerState, lr: float | None = None) -> None:
    """One in-place AdamW update of every tensor in ``params`` (name -> Tensor).

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameter {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad.data.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g.data, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g.data *= factor
    return total


def warmup_constant(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant.

    ``step`` is 0-based; the first step uses ``base_lr / warmup_steps``.
    """
    warmup = math.ceil(warmup_frac * total_steps)
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * (step + 1) / warmup


def fill_missing_grads(params: dict, names) -> None:
    """Give the listed parameters a zero gradient when backward left them empty."""
    for name in names:
        p = params.get(name)
        if p is not None and p.grad is None:
            p.grad = Tensor(np.zeros_like(p.data))
