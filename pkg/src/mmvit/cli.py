"""Command-line entry point: ``mmvit <command> ...``.

Exit codes: 0 success, 1 data error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .augment import LabeledExample, augment_batch
from .checkpoint import CheckpointError, FingerprintMismatchError, config_sidecar, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DatasetError, load_dataset, make_synthetic
from .formats import FormatError, write_ntc
from .frontend import InputError, TARGET_FRAMES, fit_length, load_wav, logmel_fbank
from .model import describe_schedule
from .train import TrainingDivergedError, check_task, evaluate_model, load_model, train
from .transfer import TransferError, apply_transfer

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2

log = logging.getLogger("mmvit")


class UsageError(Exception):
    pass


def _print_config(cfg: RunConfig, extra: dict | None = None) -> None:
    print("# resolved config")
    for key, value in cfg.to_flat().items():
        print(f"{key}={value}")
    for key, value in (extra or {}).items():
        print(f"{key}={value}")
    print(f"# fingerprint {cfg.model.fingerprint():#018x}")


def _resolve(args, base_overrides=()) -> RunConfig:
    overrides = list(base_overrides) + list(getattr(args, "set", None) or [])
    return load_config(args.config, overrides)


# -- commands ---------------------------------------------------------------

def cmd_extract_features(args) -> int:
    print("# resolved config")
    print("frontend.sample_rate_hz=16000\nfrontend.window_ms=25\nfrontend.shift_ms=10\nfrontend.n_mels=128")
    print(f"frontend.target_frames={args.frames}")
    if args.wav:
        wavs = [Path(args.wav)]
    else:
        root = Path(args.wav_dir)
        if not root.is_dir():
            raise UsageError(f"--wav-dir {root} is not a directory")
        wavs = sorted(p for p in root.iterdir() if p.suffix.lower() == ".wav")
        if not wavs:
            log.warning("no .wav files in %s; nothing to do", root)
            print(f"warning: no .wav files in {root}", file=sys.stderr)
            return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for wav in wavs:
        try:
            spec = fit_length(logmel_fbank(load_wav(wav)), args.frames)
        except (FormatError, InputError, OSError) as exc:
            message = str(exc)
            failures.append(message if message.startswith(str(wav)) else f"{wav}: {message}")
            continue
        target = out / (wav.stem + ".ntc")
        write_ntc(target, spec.frames)
        print(f"wrote {target} {spec.frames.shape[0]}x{spec.frames.shape[1]}")
    for line in failures:
        print(f"error: {line}", file=sys.stderr)
    print(f"{len(wavs) - len(failures)} written, {len(failures)} failed")
    return EXIT_DATA if failures else EXIT_OK


def cmd_train(args) -> int:
    overrides = []
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.no_cutmix:
        overrides.append("aug.cutmix=false")
    cfg = _resolve(args, overrides)
    out = Path(args.out)
    _print_config(cfg, {"run.out": out, "run.data": args.data, "run.resume": str(args.resume).lower()})
    dataset = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    check_task(cfg, dataset)
    if args.resume and not (out / "last.ckpt").is_file():
        raise UsageError(f"--resume given but {out / 'last.ckpt'} does not exist")
    result = train(cfg, dataset, out, eval_dataset=eval_set, resume=args.resume)
    for row in result.history:
        print(f"epoch {row['epoch']} step {row['step']} loss {row['loss']:.5f} metric {row['metric']:.4f} lr {row['lr']:.3g}")
    print(f"best metric {result.best_metric:.6f} at epoch {result.best_epoch}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _print_config(cfg, {"run.ckpt": args.ckpt, "run.data": args.data})
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    dataset = load_dataset(args.data)
    check_task(cfg, dataset)
    model = load_model(cfg, ckpt)
    report, _ = evaluate_model(model, dataset, cfg.train.batch_size)
    print(report)
    out = Path(args.out) if args.out else ckpt.with_name(ckpt.name + ".eval.jsonl")
    record = {"checkpoint": str(ckpt), "data": str(args.data), **report.to_json()}
    with open(out, "a") as fh:
        fh.write(json.dumps(record) + "\n")
    print(f"appended report to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _resolve(args)
    _print_config(cfg)
    print(describe_schedule(cfg.model))
    return EXIT_OK


def cmd_transfer(args) -> int:
    src_path = Path(args.from_)
    if not src_path.is_file():
        raise UsageError(f"source checkpoint {src_path} not found")
    if args.from_config:
        src_cfg = load_config(args.from_config)
    else:
        sidecar = config_sidecar(src_path)
        if not sidecar.is_file():
            raise UsageError(f"{sidecar} missing; pass --from-config to name the source configuration")
        src_cfg = parse_config(sidecar.read_text(), source=str(sidecar))
    dst_cfg = load_config(args.to_config, args.set or [])
    _print_config(dst_cfg, {"run.from": src_path, "run.out": args.out})
    params, fingerprint = load_checkpoint(src_path, src_cfg.model.fingerprint())
    rng = np.random.default_rng(args.seed if args.seed is not None else dst_cfg.model.init_seed)
    out_params, plan = apply_transfer(params, src_cfg.model, dst_cfg.model, rng, source_fingerprint=fingerprint)
    print(plan.audit_log())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_params, dst_cfg.model.fingerprint(), out)
    config_sidecar(out).write_text(dst_cfg.dumps())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    overrides = ["aug.enabled=true"]
    if args.seed is not None:
        overrides.append(f"aug.seed={args.seed}")
    if args.no_cutmix:
        overrides.append("aug.cutmix=false")
    cfg = _resolve(args, overrides)
    _print_config(cfg, {"run.data": args.data, "run.out": args.out})
    dataset = load_dataset(args.data)
    count = min(args.count, len(dataset))
    batch = []
    for i in range(count):
        x = dataset.features(i)
        if x.shape[0] != 1:
            raise DatasetError(f"{dataset.entries[i][0]}: augment-preview needs single-channel spectrograms, got {x.shape}")
        batch.append(LabeledExample(x[0], dataset.label_vector(i)))
    trace: list = []
    mixed = augment_batch(batch, cfg.aug, np.random.default_rng(cfg.aug.seed), trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (before, after) in enumerate(zip(batch, mixed)):
        write_ntc(out / f"{i:03d}_before.ntc", before.features)
        write_ntc(out / f"{i:03d}_after.ntc", after.features)
    if not trace:
        print("batch smaller than 2: mixing skipped")
    for rec in trace:
        parts = [f"sample {rec['index']}", f"op={rec['op']}", f"partner={rec['partner']}"]
        if "lam" in rec:
            parts.append(f"lambda={rec['lam']:.6f}")
        if rec["op"] == "cutmix":
            parts.append(f"cut=[{rec['start']},{rec['start'] + rec['width']})")
        if "mask" in rec:
            t0, tw, f0, fw = rec["mask"]
            parts.append(f"time_mask=[{t0},{t0 + tw}) freq_mask=[{f0},{f0 + fw})")
        if "roll" in rec:
            parts.append(f"roll={rec['roll']}")
        print(" ".join(parts))
    print(f"wrote {2 * len(batch)} tensors to {out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 3:
        raise UsageError("--shape must be C,H,W")
    print("# resolved config")
    print(f"synth.samples={args.samples}\nsynth.classes={args.classes}\nsynth.shape={args.shape}")
    print(f"synth.multilabel={str(args.multilabel).lower()}\nsynth.seed={args.seed}")
    index = make_synthetic(args.out, args.samples, args.classes, shape, args.seed, args.multilabel)
    print(f"wrote {len(index)} samples to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_config(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", required=required, default=None if required else "audio",
                   help="preset name (audio, image, tiny) or config file path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvit", description="Multiscale multiview vision transformer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", help="WAV -> log-mel NTC tensors")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav")
    src.add_argument("--wav-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=TARGET_FRAMES)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    p.add_argument("--no-cutmix", action="store_true", help="mixup half the batch, leave the rest unmixed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON-lines file to append to (default <ckpt>.eval.jsonl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print the layer schedule")
    _add_config(p, required=False)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("transfer", help="adapt a checkpoint to another input geometry")
    p.add_argument("--from", dest="from_", required=True)
    p.add_argument("--from-config", help="source config (default: the checkpoint's .cfg sidecar)")
    p.add_argument("--to-config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a target config key")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("augment-preview", help="augment a few samples and save before/after tensors")
    _add_config(p, required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-cutmix", action="store_true")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("synth-data", help="write a small synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--shape", default="1,64,32")
    p.add_argument("--multilabel", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TransferError, FingerprintMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FormatError, InputError, CheckpointError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
