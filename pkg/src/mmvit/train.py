"""Training and evaluation loops.

Each batch draws its randomness (augmentation, dropout) from a generator
seeded by ``(seed, epoch, batch)``, so a run is reproducible given its seed
and resumes continue the same streams. Runs are bit-reproducible in
single-worker mode; with ``MMVIT_NUM_WORKERS > 1`` batches are prepared in
threads and only the optimisation step stays serial.
"""

from __future__ import annotations

import csv
import logging
import os
import time
import zipfile
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from . import functional as F
from .augment import LabeledExample, augment_batch
from .checkpoint import CorruptCheckpointError, FingerprintMismatchError, config_sidecar, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DatasetIndex, weighted_sampler
from .metrics import EvalReport, evaluate
from .model import MMViT
from .optim import OptimizerState, adamw_step, clip_grad_norm, fill_missing_grads, warmup_constant
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "loss", "metric", "lr", "wall_ms")
BEST = "best.ckpt"
LAST = "last.ckpt"
OPTIMIZER = "last.opt"  # numpy .npz archive; moments stay float64 so resume is exact


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class TrainResult:
    model: MMViT
    best_metric: float
    best_epoch: int
    step: int
    history: list = field(default_factory=list)  # one dict per epoch, keys LOG_FIELDS
    out_dir: Optional[Path] = None


def num_workers_from_env() -> int:
    raw = os.environ.get("MMVIT_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MMVIT_NUM_WORKERS must be an integer, got {raw!r}") from exc


def check_task(cfg: RunConfig, dataset: DatasetIndex) -> None:
    """Reject datasets the configured head cannot represent."""
    if dataset.is_multilabel and cfg.model.task != "multilabel":
        raise ConfigError(
            f"dataset {dataset.root} is multilabel but model.task={cfg.model.task!r}; set model.task=multilabel"
        )
    if dataset.num_classes != cfg.model.num_classes:
        raise ConfigError(
            f"dataset {dataset.root} has {dataset.num_classes} classes but model.num_classes={cfg.model.num_classes}"
        )


def batch_rng(seed: int, epoch: int, batch: int, stream: int, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, batch, stream, extra]))


def loss_fn(logits: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "multilabel":
        return F.binary_cross_entropy_with_logits(logits, targets)
    return F.cross_entropy(logits, targets)


def prepare_batch(cfg: RunConfig, dataset: DatasetIndex, indices, rng: np.random.Generator) -> tuple:
    """Stack features and labels for ``indices`` and apply augmentation."""
    shape = cfg.model.input
    xs = [dataset.features(int(i), shape) for i in indices]
    ys = [dataset.label_vector(int(i)) for i in indices]
    if cfg.aug.enabled:
        if shape[0] != 1:
            log.debug("spectrogram augmentations skipped for %d-channel input", shape[0])
        else:
            mixed = augment_batch([LabeledExample(x[0], y) for x, y in zip(xs, ys)], cfg.aug, rng)
            xs = [m.features[None] for m in mixed]
            ys = [m.label for m in mixed]
    return np.stack(xs).astype(np.float32), np.stack(ys)


def _batches(cfg: RunConfig, dataset: DatasetIndex, plan: list, seed: int, epoch: int, workers: int) -> Iterator[tuple]:
    def job(b):
        return prepare_batch(cfg, dataset, plan[b], batch_rng(seed, epoch, b, 0, cfg.aug.seed))

    if workers <= 1:
        for b in range(len(plan)):
            yield job(b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        next_b = 0
        while next_b < len(plan) or pending:
            while next_b < len(plan) and len(pending) < 2 * workers:
                pending.append(pool.submit(job, next_b))
                next_b += 1
            yield pending.popleft().result()


def predict(model: MMViT, dataset: DatasetIndex, batch_size: int = 8) -> np.ndarray:
    """Logits for every sample, in manifest order."""
    was_training = model.training
    model.eval()
    shape = model.cfg.input
    out = []
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                x = np.stack([dataset.features(i, shape) for i in range(start, min(start + batch_size, len(dataset)))])
                out.append(model(x).data.astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate_model(model: MMViT, dataset: DatasetIndex, batch_size: int = 8) -> tuple:
    """``(EvalReport, logits)`` on ``dataset``."""
    scores = predict(model, dataset, batch_size)
    labels = np.stack([dataset.label_vector(i) for i in range(len(dataset))])
    return evaluate(scores, labels, model.cfg.task), scores


def save_model(model: MMViT, cfg: RunConfig, path: Path) -> None:
    save_checkpoint(model.state_dict(), cfg.model.fingerprint(), path)
    config_sidecar(path).write_text(cfg.dumps())


def _save_optimizer(arrays: dict, fingerprint: int, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __fingerprint__=np.array([fingerprint], dtype=np.uint64), **arrays)
    os.replace(tmp, path)


def _load_optimizer(path: Path, fingerprint: int) -> dict:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable optimizer state ({exc})") from exc
    found = int(arrays.pop("__fingerprint__", np.zeros(1, dtype=np.uint64))[0])
    if found != fingerprint:
        raise FingerprintMismatchError(fingerprint, found)
    return arrays


def _epoch_plan(cfg: RunConfig, dataset: DatasetIndex, seed: int, epoch: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    n = len(dataset)
    order = weighted_sampler(dataset, rng, n) if cfg.train.weighted_sampling else rng.permutation(n)
    bs = cfg.train.batch_size
    return [order[i:i + bs] for i in range(0, n, bs)]


def train(
    cfg: RunConfig,
    dataset: DatasetIndex,
    out_dir: Union[str, Path, None] = None,
    eval_dataset: Optional[DatasetIndex] = None,
    resume: bool = False,
    num_workers: Optional[int] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Train ``cfg.model`` on ``dataset`` for ``cfg.train.epochs`` epochs.

    Args:
        cfg: resolved run configuration; ``cfg.train.seed`` drives shuffling,
            augmentation and dropout.
        dataset: training data.
        out_dir: where ``best.ckpt``, ``last.ckpt``, ``last.opt`` and
            ``metrics.csv`` go. ``None`` keeps everything in memory.
        eval_dataset: evaluated after every epoch (defaults to ``dataset``).
        resume: continue from ``last.ckpt``/``last.opt`` in ``out_dir``.
        num_workers: batch-preparation threads (default ``MMVIT_NUM_WORKERS``).
        max_steps: stop after this many optimiser steps in total.

    Returns:
        TrainResult with the final model and the per-epoch history.

    Raises:
        TrainingDivergedError: the loss became non-finite.
        ConfigError: dataset and config disagree on task or class count.
    """
    check_task(cfg, dataset)
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    check_task(cfg, eval_dataset)
    tc = cfg.train
    if tc.batch_size < 1 or tc.epochs < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
    workers = num_workers if num_workers is not None else num_workers_from_env()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = MMViT(cfg.model)
    params = dict(model.named_parameters())
    dead = model.unreachable_parameters()
    state = OptimizerState(lr=tc.lr, weight_decay=tc.weight_decay, betas=tuple(tc.betas), eps=tc.eps)
    start_epoch = 0
    best_metric, best_epoch = -np.inf, -1
    if resume:
        if out is None or not (out / LAST).is_file() or not (out / OPTIMIZER).is_file():
            raise FileNotFoundError(f"nothing to resume in {out}: need {LAST} and {OPTIMIZER}")
        weights, _ = load_checkpoint(out / LAST, cfg.model.fingerprint())
        model.load_state_dict(weights)
        extra = _load_optimizer(out / OPTIMIZER, cfg.model.fingerprint())
        state.load_arrays(extra)
        start_epoch = int(extra["epoch"][0]) + 1
        best_metric, best_epoch = float(extra["best"][0]), int(extra["best"][1])
        log.info("resuming at epoch %d, step %d", start_epoch + 1, state.step)

    batches_per_epoch = -(-len(dataset) // tc.batch_size)
    total_steps = tc.epochs * batches_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    history = []
    csv_file = None
    writer = None
    if out is not None:
        path = out / "metrics.csv"
        fresh = not path.exists() or not resume
        csv_file = open(path, "w" if not resume else "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(LOG_FIELDS)
    try:
        model.train()
        for epoch in range(start_epoch, tc.epochs):
            if max_steps is not None and state.step >= max_steps:
                break
            t0 = time.perf_counter()
            plan = _epoch_plan(cfg, dataset, tc.seed, epoch)
            losses = []
            lr = tc.lr
            for b, (x, y) in enumerate(_batches(cfg, dataset, plan, tc.seed, epoch, workers)):
                if max_steps is not None and state.step >= max_steps:
                    break
                lr = warmup_constant(state.step, total_steps, tc.lr, tc.warmup_frac)
                model.dropout_rng = batch_rng(tc.seed, epoch, b, 1)
                model.zero_grad()
                loss = loss_fn(model(x), y, cfg.model.task)
                value = float(np.asarray(loss.data).reshape(-1)[0])
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch + 1}, step {state.step + 1} (lr={lr:g}); "
                        "try a lower train.lr or enable gradient clipping"
                    )
                loss.backward()
                fill_missing_grads(params, dead)
                if tc.clip_grad > 0:
                    clip_grad_norm(params.values(), tc.clip_grad)
                adamw_step(params, state, lr)
                losses.append(value)
            report, _ = evaluate_model(model, eval_dataset, tc.batch_size)
            row = {
                "epoch": epoch + 1,
                "step": state.step,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "metric": report.value,
                "lr": lr,
                "wall_ms": int(round((time.perf_counter() - t0) * 1000)),
            }
            history.append(row)
            log.info("epoch %d step %d loss %.5f %s %.4f", row["epoch"], row["step"], row["loss"], report.metric_name, report.value)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_FIELDS])
                csv_file.flush()
            if report.value > best_metric:
                best_metric, best_epoch = report.value, epoch + 1
                if out is not None:
                    save_model(model, cfg, out / BEST)
            if out is not None:
                save_model(model, cfg, out / LAST)
                extra = state.to_arrays()
                extra["epoch"] = np.array([epoch], dtype=np.float64)
                extra["best"] = np.array([best_metric, best_epoch], dtype=np.float64)
                _save_optimizer(extra, cfg.model.fingerprint(), out / OPTIMIZER)
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(model, float(best_metric), best_epoch, state.step, history, out)


def load_model(cfg: RunConfig, path: Union[str, Path], allow_transfer: bool = False) -> MMViT:
    weights, _ = load_checkpoint(path, cfg.model.fingerprint(), allow_transfer=allow_transfer)
    model = MMViT(cfg.model)
    model.load_state_dict(weights)
    return model


__all__ = [
    "EvalReport",
    "TrainResult",
    "TrainingDivergedError",
    "evaluate_model",
    "load_model",
    "predict",
    "train",
]
