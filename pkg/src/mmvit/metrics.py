"""Evaluation metrics: mean average precision and top-1 accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class EvalReport:
    metric_name: str
    value: float
    samples: int
    per_class_ap: Optional[np.ndarray] = None  # NaN where a class has no positives
    absent_classes: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"metric": self.metric_name, "value": self.value, "samples": self.samples}
        if self.per_class_ap is not None:
            out["per_class_ap"] = [None if np.isnan(a) else float(a) for a in self.per_class_ap]
            out["absent_classes"] = list(self.absent_classes)
        return out

    def __str__(self) -> str:
        text = f"{self.metric_name}={self.value:.6f} over {self.samples} samples"
        if self.absent_classes:
            text += f" ({len(self.absent_classes)} classes without positives excluded)"
        return text


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one class: mean of precision at the rank of each positive.

    Ranking is by descending score; ties keep the original order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(labels)[order] > 0
    if not hits.any():
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.mean())


def mean_average_precision(scores, labels) -> EvalReport:
    """mAP over the classes that have at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal N x C arrays")
    ap = np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])
    present = ~np.isnan(ap)
    if not present.any():
        raise ValueError("no class has a positive label; mAP is undefined")
    absent = np.flatnonzero(~present).tolist()
    return EvalReport("mAP", float(ap[present].mean()), scores.shape[0], ap, absent)


def top1_accuracy(scores, labels) -> float:
    """Fraction of rows whose arg-max score equals the label.

    ``labels`` holds class indices, or one-hot/soft rows (their arg-max is
    used). Ties resolve to the lowest index.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    if len(scores) == 0:
        return 0.0
    return float(np.mean(scores.argmax(axis=1) == labels))


def evaluate(scores, labels, task: str) -> EvalReport:
    if task == "multilabel":
        return mean_average_precision(scores, labels)
    return EvalReport("top1", top1_accuracy(scores, labels), len(scores))
