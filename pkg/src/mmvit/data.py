"""Dataset manifests, class-balanced sampling and a synthetic dataset generator.

A dataset directory holds::

    manifest.tsv   path<TAB>comma-separated class ids   (paths relative to the directory)
    classes.txt    id<TAB>name, one class per line
    *.ntc          feature tensors, [C, H, W] or [H, W] for single-channel
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .formats import FormatError, read_ntc, write_ntc

MANIFEST = "manifest.tsv"
CLASSES = "classes.txt"


class DatasetError(ValueError):
    """Malformed manifest, class map or feature file."""


@dataclass
class DatasetIndex:
    root: Path
    entries: list  # (relative path, tuple of class ids)
    class_names: list
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise DatasetError(f"{self.root}: dataset is empty")
        n = len(self.class_names)
        for path, labels in self.entries:
            if not labels:
                raise DatasetError(f"{path}: no labels")
            bad = [c for c in labels if not 0 <= c < n]
            if bad:
                raise DatasetError(f"{path}: class id {bad[0]} outside 0..{n - 1}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_multilabel(self) -> bool:
        return any(len(labels) > 1 for _, labels in self.entries)

    def class_frequencies(self) -> np.ndarray:
        freq = np.zeros(self.num_classes, dtype=np.int64)
        for _, labels in self.entries:
            for c in set(labels):
                freq[c] += 1
        return freq

    def sample_weights(self) -> np.ndarray:
        """``w_i`` = sum over the sample's classes of 1 / class frequency."""
        inv = np.zeros(self.num_classes)
        freq = self.class_frequencies()
        inv[freq > 0] = 1.0 / freq[freq > 0]
        return np.array([inv[list(set(labels))].sum() for _, labels in self.entries])

    def label_vector(self, i: int) -> np.ndarray:
        """Multi-hot for multilabel data; for a single label this is one-hot."""
        y = np.zeros(self.num_classes)
        y[list(self.entries[i][1])] = 1.0
        return y

    def features(self, i: int, shape: Optional[tuple] = None) -> np.ndarray:
        """Load (and cache) sample ``i`` as ``[C, H, W]`` float32."""
        with self._lock:
            cached = self._cache.get(i)
        if cached is None:
            path = self.root / self.entries[i][0]
            try:
                cached = read_ntc(path)
            except OSError as exc:
                raise DatasetError(f"{path}: {exc.strerror or exc}") from exc
            if cached.ndim == 2:
                cached = cached[None]
            with self._lock:
                self._cache[i] = cached
        if shape is not None and tuple(cached.shape) != tuple(shape):
            raise DatasetError(f"{self.entries[i][0]}: features {cached.shape}, model expects {tuple(shape)}")
        return cached


def load_dataset(root: Union[str, Path]) -> DatasetIndex:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{root}: missing {MANIFEST}")
    classes_path = root / CLASSES
    if not classes_path.is_file():
        raise DatasetError(f"{root}: missing {CLASSES}")
    names = {}
    for lineno, line in enumerate(classes_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, name = line.partition("\t")
        try:
            names[int(key)] = name.strip() or key
        except ValueError as exc:
            raise DatasetError(f"{classes_path}:{lineno}: bad class id {key!r}") from exc
    if sorted(names) != list(range(len(names))):
        raise DatasetError(f"{classes_path}: class ids must be 0..{len(names) - 1} without gaps")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        path, sep, ids = line.partition("\t")
        if not sep:
            raise DatasetError(f"{manifest}:{lineno}: expected path<TAB>class ids")
        try:
            labels = tuple(int(c) for c in ids.split(",") if c.strip())
        except ValueError as exc:
            raise DatasetError(f"{manifest}:{lineno}: bad class ids {ids!r}") from exc
        entries.append((path, labels))
    return DatasetIndex(root, entries, [names[i] for i in range(len(names))])


def weighted_sampler(index: DatasetIndex, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` indices drawn with replacement, probability proportional to sample weight."""
    weights = index.sample_weights()
    if len(weights) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    return rng.choice(len(weights), size=n, replace=True, p=weights / weights.sum())


def write_manifest(root: Path, entries: list, class_names: list) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).write_text("".join(f"{p}\t{','.join(map(str, labels))}\n" for p, labels in entries))
    (root / CLASSES).write_text("".join(f"{i}\t{name}\n" for i, name in enumerate(class_names)))


def synthetic_features(label_ids, shape: tuple, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Noise plus one frequency band per class; bands tile the frequency axis."""
    c, t, f = shape
    x = 0.3 * rng.standard_normal(shape)
    width = max(1, f // num_classes)
    for label in label_ids:
        lo = (label * f) // num_classes
        envelope = 1.5 + 0.5 * np.sin(np.linspace(0, 2 * np.pi * rng.uniform(1, 3), t) + rng.uniform(0, 2 * np.pi))
        x[:, :, lo:lo + width] += envelope[None, :, None]
    return x.astype(np.float32)


def make_synthetic(
    root: Union[str, Path],
    samples: int,
    num_classes: int,
    shape: tuple = (1, 64, 32),
    seed: int = 0,
    multilabel: bool = False,
) -> DatasetIndex:
    """Write a small separable dataset and return its index.

    Single-label data cycles through classes so every class appears when
    ``samples >= num_classes``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(samples):
        if multilabel:
            k = int(rng.integers(1, min(3, num_classes) + 1))
            labels = tuple(sorted(rng.choice(num_classes, size=k, replace=False).tolist()))
        else:
            labels = (i % num_classes,)
        name = f"clip{i:05d}.ntc"
        write_ntc(root / name, synthetic_features(labels, shape, num_classes, rng))
        entries.append((name, labels))
    write_manifest(root, entries, [f"class{c}" for c in range(num_classes)])
    return load_dataset(root)


__all__ = [
    "DatasetError",
    "DatasetIndex",
    "FormatError",
    "load_dataset",
    "make_synthetic",
    "weighted_sampler",
    "write_manifest",
]
