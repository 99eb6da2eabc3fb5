"""``vgdm`` command line: phantom, train, sample, eval, inspect, pr-curve.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import (
    PhantomSpec,
    VolumeFormatError,
    generate_phantom,
    load_dataset,
    read_volume,
    sample_seed,
    write_dataset,
    write_volume,
)
from .denoiser import ShapeAuditError
from .metrics import dice_score, evaluate, precision_recall_curve
from .sampler import sample_mask
from .training import Checkpoint, CheckpointError, NonFiniteLossError, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


def _err(message: str) -> None:
    print(f"vgdm: error: {message}", file=sys.stderr)


def cmd_phantom(args: argparse.Namespace) -> int:
    if args.config:
        spec = RunConfig.load(args.config).phantom_spec()
        if args.size is not None and args.size != spec.size:
            raise ConfigError("phantom_size", f"{spec.size} conflicts with --size {args.size}")
    else:
        spec = PhantomSpec.default_for(args.size or 32, args.channels)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    seeds = [sample_seed(args.seed, i) for i in range(args.n)]
    samples = [generate_phantom(spec, s, sample_id=f"phantom_{i:04d}") for i, s in enumerate(seeds)]
    try:
        write_dataset(out, samples, seeds)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {args.n} phantoms ({spec.size}x{spec.size}, {spec.channels} channels) to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig.load(args.config)
    data_dir = args.data or run["data"]
    out = args.out or run["out"]
    if data_dir is None:
        raise ConfigError("data", "no dataset given (--data or config key)")
    if out is None:
        raise ConfigError("out", "no output path given (--out or config key)")
    samples = load_dataset(data_dir)
    c, h, w = samples[0].image.shape
    if h != w:
        raise DataError(f"images must be square, got {h}x{w}")
    config = run.denoiser_config(h, c + 1)
    train_config = run.train_config()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.csv")

    def progress(step: int, values: dict[str, float]) -> None:
        if not args.quiet:
            print(f"step {step:6d}  total {values['total']:.5f}  mse {values['mse']:.5f}  dice {values['dice']:.4f}")

    state = train(samples, config, train_config, log_path=log_path, progress=progress)
    # no paths: the checkpoint bytes depend only on config, data contents and seed
    extra = {"train_seed": train_config.seed, "samples": len(samples)}
    save_checkpoint(out, Checkpoint.from_state(state, config, train_config.schedule(), extra))
    print(f"checkpoint {out} (step {state.step}); log {log_path}")
    return EXIT_OK


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None


def cmd_sample(args: argparse.Namespace) -> int:
    ckpt = _load_ckpt(args.ckpt)
    image, _ = read_volume(args.input)
    cfg = ckpt.config
    expected = (cfg.in_channels - 1, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise DataError(f"input shape {image.shape} does not match checkpoint config {expected}")
    if args.threshold > 1.0:
        print(f"vgdm: warning: threshold {args.threshold} > 1 yields an empty mask", file=sys.stderr)
    pred = sample_mask(image, ckpt.sampling_params(), cfg, ckpt.noise_schedule(), args.seed, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "prob.vgdv", pred.prob)
    write_volume(out / "mask.vgdv", pred.mask)
    print(f"wrote {out / 'prob.vgdv'} and {out / 'mask.vgdv'} ({int(pred.mask.sum())} foreground pixels)")
    if args.gt:
        gt, _ = read_volume(args.gt)
        gt = gt.reshape(gt.shape[-2:])
        if gt.shape != pred.mask.shape:
            raise DataError(f"ground truth shape {gt.shape} != prediction shape {pred.mask.shape}")
        print(f"dice {dice_score(pred.mask, gt > 0.5):.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = _load_ckpt(args.ckpt)
    samples = load_dataset(args.data)
    cfg = ckpt.config
    for s in samples:
        if s.image.shape != (cfg.in_channels - 1, cfg.image_size, cfg.image_size):
            raise DataError(f"sample {s.id} shape {s.image.shape} does not match checkpoint config")
    report = evaluate(samples, ckpt.sampling_params(), cfg, ckpt.noise_schedule(), args.seed, args.threshold)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.report)
    hd = "undefined" if report.hd95 is None else f"{report.hd95:.4f}"
    auprc = "undefined" if report.auprc is None else f"{report.auprc:.4f}"
    print(
        f"n={len(samples)} dice={report.dice:.4f} iou={report.iou:.4f} hd95={hd} "
        f"(undefined on {report.hd95_undefined}) auprc={auprc}"
    )
    print(f"report {args.report}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    ckpt = _load_ckpt(args.ckpt)
    print(f"version      {ckpt.version}")
    for key, value in ckpt.config.to_dict().items():
        print(f"{key:<12} {value}")
    for key, value in ckpt.schedule.items():
        print(f"{key:<12} {value}")
    print(f"parameters   {ckpt.parameter_count()}")
    print(f"step         {ckpt.step}")
    print(f"ema          {'yes' if ckpt.ema is not None else 'no'}")
    print(f"rng_digest   {ckpt.rng_digest}")
    return EXIT_OK


def cmd_pr_curve(args: argparse.Namespace) -> int:
    """Pooled per-pixel precision/recall curve over a dataset, as CSV for external plotting."""
    ckpt = _load_ckpt(args.ckpt)
    samples = load_dataset(args.data)
    scores, labels = [], []
    for i, s in enumerate(samples):
        pred = sample_mask(s.image, ckpt.sampling_params(), ckpt.config, ckpt.noise_schedule(), sample_seed(args.seed, i))
        scores.append(pred.prob.ravel())
        labels.append(s.mask.ravel())
    thresholds, precision, recall = precision_recall_curve(np.concatenate(scores), np.concatenate(labels))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall"])
        for row in zip(thresholds, precision, recall):
            writer.writerow([f"{v:.8g}" for v in row])
    print(f"wrote {len(thresholds)} points to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgdm", description="Transformer-backed diffusion segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config supplying phantom_* keys")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a denoiser on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint path; the CSV log is written next to it")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a mask for one image volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory for prob.vgdv and mask.vgdv")
    p.add_argument("--gt", help="ground-truth mask volume; prints Dice")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("pr-curve", help="emit precision/recall curve data as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pr_curve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        _err(f"numeric abort: {exc}")
        return EXIT_NUMERIC
    except (DataError, VolumeFormatError, CheckpointError, ShapeAuditError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_DATA
    except ValueError as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
