"""Training-time augmentations for spectrogram batches.

Features are ``[T, F]`` arrays (time first). All randomness comes from an
explicit ``numpy.random.Generator`` so every function is a deterministic
function of its inputs and the generator state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .config import AugmentConfig

log = logging.getLogger(__name__)


@dataclass
class LabeledExample:
    features: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.label = np.asarray(self.label, dtype=np.float64)


def _check_pair(a: LabeledExample, b: LabeledExample, lam: float) -> None:
    if a.features.shape != b.features.shape:
        raise ValueError(f"feature shapes differ: {a.features.shape} vs {b.features.shape}")
    if a.label.shape != b.label.shape:
        raise ValueError(f"label shapes differ: {a.label.shape} vs {b.label.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {lam}")


def mixup(a: LabeledExample, b: LabeledExample, lam: Optional[float] = None, rng=None, alpha: float = 0.5) -> LabeledExample:
    """Convex blend ``lam * a + (1 - lam) * b`` of features and labels."""
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    _check_pair(a, b, lam)
    if lam == 1.0:
        return LabeledExample(a.features.copy(), a.label.copy())
    features = lam * a.features + (1.0 - lam) * b.features
    label = lam * a.label + (1.0 - lam) * b.label
    return LabeledExample(features.astype(a.features.dtype, copy=False), label)


def cutmix_width(num_frames: int, lam: float) -> int:
    return int(round((1.0 - lam) * num_frames))


def audio_cutmix(
    a: LabeledExample, b: LabeledExample, lam: Optional[float] = None, rng=None, alpha: float = 0.5, start: Optional[int] = None
) -> tuple:
    """Replace a contiguous block of ``a``'s frames with ``b``'s.

    The cut spans every frequency bin, so each output frame is copied whole
    from exactly one parent. Returns ``(example, start, width)``; the label
    weight of ``a`` is the fraction of frames it kept.
    """
    if rng is None and (lam is None or start is None):
        raise ValueError("audio_cutmix needs an rng unless both lam and start are given")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    _check_pair(a, b, lam)
    t = a.features.shape[0]
    width = cutmix_width(t, lam)
    if start is None:
        start = int(rng.integers(0, t - width + 1))
    if not 0 <= start <= t - width:
        raise ValueError(f"cut start {start} out of range for width {width} and {t} frames")
    features = a.features.copy()
    features[start:start + width] = b.features[start:start + width]
    kept = 1.0 - width / t
    label = kept * a.label + (1.0 - kept) * b.label
    return LabeledExample(features, label), start, width


def specaugment(
    features: np.ndarray, rng=None, max_time: int = 192, max_freq: int = 48, widths: Optional[tuple] = None
) -> tuple:
    """One time mask and one frequency mask, both filled with zeros.

    Mask widths are uniform on ``0..min(max, extent)`` and positions uniform
    over the valid range. Returns ``(masked copy, (t0, tw, f0, fw))``.
    """
    t, f = features.shape
    if widths is None:
        tw = int(rng.integers(0, min(max_time, t) + 1))
        fw = int(rng.integers(0, min(max_freq, f) + 1))
    else:
        tw, fw = widths
        if not (0 <= tw <= min(max_time, t) and 0 <= fw <= min(max_freq, f)):
            raise ValueError(f"mask widths {widths} exceed the configured maxima")
    t0 = int(rng.integers(0, t - tw + 1)) if rng is not None else 0
    f0 = int(rng.integers(0, f - fw + 1)) if rng is not None else 0
    out = features.copy()
    out[t0:t0 + tw, :] = 0.0
    out[:, f0:f0 + fw] = 0.0
    return out, (t0, tw, f0, fw)


def random_roll(features: np.ndarray, shift: Optional[int] = None, rng=None) -> tuple:
    """Circular shift along time; returns ``(rolled, shift)``."""
    t = features.shape[0]
    if shift is None:
        shift = int(rng.integers(0, t))
    return np.roll(features, shift, axis=0), int(shift)


def augment_batch(
    batch: list, cfg: AugmentConfig, rng: np.random.Generator, trace: Optional[list] = None
) -> list:
    """Mix half the batch with Mixup and half with audio CutMix, then mask and roll.

    Partners are drawn uniformly from the rest of the batch (pre-mix
    copies). With ``cfg.cutmix`` false the second half is left unmixed.
    ``trace``, when given, receives one dict per output describing what was
    applied (used for previews).
    """
    if not cfg.enabled:
        return list(batch)
    n = len(batch)
    if n < 2:
        log.info("augment_batch: batch of %d, skipping mixing", n)
        return list(batch)
    order = rng.permutation(n)
    mix_set = set(order[: n // 2].tolist())
    out = []
    for i, example in enumerate(batch):
        partner = int(rng.integers(0, n - 1))
        partner += partner >= i
        record = {"index": i, "partner": partner}
        if i in mix_set:
            lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
            mixed = mixup(example, batch[partner], lam)
            record.update(op="mixup", lam=lam)
        elif cfg.cutmix:
            lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
            mixed, start, width = audio_cutmix(example, batch[partner], lam, rng)
            record.update(op="cutmix", lam=lam, start=start, width=width)
        else:
            mixed = replace(example, features=example.features.copy(), label=example.label.copy())
            record.update(op="none")
        features = mixed.features
        if cfg.specaug_max_time > 0 or cfg.specaug_max_freq > 0:
            features, mask = specaugment(features, rng, cfg.specaug_max_time, cfg.specaug_max_freq)
            record["mask"] = mask
        if cfg.roll:
            features, shift = random_roll(features, rng=rng)
            record["roll"] = shift
        out.append(LabeledExample(features, mixed.label))
        if trace is not None:
            trace.append(record)
    return out
