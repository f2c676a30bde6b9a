"""Differentiable operations on :class:`~mmvit.tensor.Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` for inputs that
need none). Broadcast reduction of gradients is handled by the engine.
"""

from __future__ import annotations

import builtins
import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, as_tensor, is_grad_enabled, make_result


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _coerce(a, b) -> tuple:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,), "scale")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_result(out, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def backward(g):
        sig = np.exp(-np.logaddexp(0.0, -x))
        return ((g * sig).astype(x.dtype, copy=False),)

    return make_result(out, (a,), backward, "softplus")


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> Optional[tuple]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    items = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    axis %= ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat size mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    axis %= a.ndim
    sizes = [int(s) for s in sizes]
    if builtins.sum(sizes) != a.shape[axis] or any(s < 0 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not cover extent {a.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(a, tuple(index)))
        start += size
    return pieces


# -- normalisation and probabilities -----------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain * x_hat + shift``."""
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(f"layernorm affine params {gain.shape}/{shift.shape} do not match last axis {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        gg = (lead * xhat.reshape(-1, n)).sum(axis=0) if gain.requires_grad else None
        gs = lead.sum(axis=0) if shift.requires_grad else None
        return gx, gg, gs

    return make_result(out.astype(xd.dtype, copy=False), (x, gain, shift), backward, "layernorm")


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return make_result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- convolution ------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        weight: ``[C_out, C_in // groups, kh, kw]``.
        bias: optional ``[C_out]``.
        stride, padding: ints or (h, w) pairs.
        groups: 1 (dense) or ``C_in`` (depthwise, one filter per channel).

    Returns:
        ``[C_out, H', W']`` (or batched) with
        ``H' = floor((H + 2 ph - kh) / sh) + 1``.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input and 4-D weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups not in (1, c):
        raise ShapeError(f"groups must be 1 or C_in={c}, got {groups}")
    if groups == 1 and cin_g != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if groups != 1 and (cin_g != 1 or cout != c):
        raise ShapeError(f"depthwise conv2d expects weight [{c},1,kh,kw], got {weight.shape}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match {cout} output channels")

    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    xd = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # windows: [N, C, Ho, Wo, kh, kw]
    windows = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    wd = weight.data
    dense = groups == 1
    if dense:
        out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("nchwij,cij->nchw", windows, wd[:, 0], optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            if dense:
                gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            else:
                gw = np.einsum("nchw,nchwij->cij", g, windows, optimize=True)[:, None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xd.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    rows = slice(i, i + sh * (ho - 1) + 1, sh)
                    cols = slice(j, j + sw * (wo - 1) + 1, sw)
                    if dense:
                        contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    else:
                        contrib = g * wd[:, 0, i, j][None, :, None, None]
                    gxp[:, :, rows, cols] += contrib
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = make_result(out, parents, backward, "conv2d")
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def avg_pool2d(x: Tensor, kernel, stride, padding) -> Tensor:
    """Average pooling with zero padding counted in the divisor."""
    kh, kw = _pair(kernel)
    c = x.shape[-3]
    weight = Tensor(np.full((c, 1, kh, kw), 1.0 / (kh * kw), dtype=x.dtype))
    return conv2d(x, weight, None, stride=stride, padding=padding, groups=c)


# -- attention --------------------------------------------------------------

_CHUNK_ELEMENTS = 1 << 24


def attention(q: Tensor, k: Tensor, v: Tensor, scale_factor: float) -> Tensor:
    """``softmax(q @ k^T * scale_factor) @ v`` over the last two axes.

    Without gradient tracking the query axis is processed in chunks so the
    score matrix never exceeds a fixed element budget.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    kt = np.swapaxes(kd, -1, -2)
    s = qd.dtype.type(scale_factor)
    needs_graph = is_grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)

    def probs(qchunk):
        scores = (qchunk @ kt) * s
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        return scores

    if not needs_graph:
        lq, lk = qd.shape[-2], kd.shape[-2]
        batch = int(np.prod(np.broadcast_shapes(qd.shape[:-2], kd.shape[:-2])))
        step = max(1, _CHUNK_ELEMENTS // max(1, lk * batch))
        if step >= lq:
            out = probs(qd) @ vd
        else:
            parts = [probs(qd[..., i:i + step, :]) @ vd for i in range(0, lq, step)]
            out = np.concatenate(parts, axis=-2)
        return Tensor(out, dtype=out.dtype)

    p = probs(qd)
    out = p @ vd

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = gs @ kd if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ qd if k.requires_grad else None
        return gq, gk, gv

    return make_result(out, (q, k, v), backward, "attention")


# -- interpolation ----------------------------------------------------------

def linear_interp_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """``[dst, src]`` matrix for corner-aligned linear resampling."""
    if src < 1 or dst < 1:
        raise ShapeError(f"interpolation sizes must be positive, got {src} -> {dst}")
    m = np.zeros((dst, src), dtype=dtype)
    if src == 1:
        m[:, 0] = 1.0
        return m
    if dst == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m


def interp_linear_1d(a: Tensor, size: int, axis: int = -1) -> Tensor:
    """Resample ``axis`` to ``size`` points; the end points are preserved."""
    axis %= a.ndim
    src = a.shape[axis]
    if src == size:
        return make_result(a.data.copy(), (a,), lambda g: (g,), "interp_identity")
    m = Tensor(linear_interp_matrix(src, size, a.dtype))
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, src)), transpose(m)), (size,))
    moved = swapaxes(a, axis, -1)
    out = matmul(moved, transpose(m))
    return swapaxes(out, axis, -1)


def interp_bilinear_2d(a: Tensor, size) -> Tensor:
    """Resample the last two axes to ``size = (h, w)``."""
    h, w = _pair(size)
    return interp_linear_1d(interp_linear_1d(a, h, axis=-2), w, axis=-1)


# -- losses -----------------------------------------------------------------

def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean over all elements of ``softplus(z) - y * z``."""
    y = Tensor(np.asarray(targets, dtype=logits.dtype))
    return mean(sub(softplus(logits), mul(y, logits)))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Softmax cross-entropy against (possibly soft) target distributions."""
    y = Tensor(np.asarray(targets, dtype=logits.dtype))
    per_row = neg(sum(mul(y, log_softmax(logits, axis=-1)), axis=-1))
    return mean(per_row)
