"""Command-line entry point: ``deepsim <command> [flags]``.

Usage errors (bad flags, unknown or missing config keys) exit with 2;
failures while running exit with 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import DatasetError
from .experiments import (
    RUNNERS,
    Experiment,
    MetricRow,
    MetricTable,
    ablation_matrix,
    decode_interpolation,
    inversion_functions,
    iterative_reencode,
    normalized_error,
    restore,
)
from .imageio import ImageFormatError, ImageRecord, atomic_write, read_image, write_grid
from .optim import NonFiniteGradient, TrainingDiverged

logger = logging.getLogger("deepsim")


class UsageError(Exception):
    pass


# flag -> config attribute
FLAG_KEYS = {"seed": "seed", "out": "out", "scale": "scale", "iters": "iters"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepsim", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: the config's out)")
        sp.add_argument("--scale", help="channel width multiplier, e.g. 1/8")
        sp.add_argument("--iters", type=int, help="iteration budget")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set any config key; may be repeated")
        sp.add_argument("--force", action="store_true",
                        help="load a checkpoint even if its config hash or format version differs")
        if checkpoint:
            sp.add_argument("--checkpoint", help="trained checkpoint (its embedded config is used "
                                                 "when --config is not given)")

    sp = sub.add_parser("train", help="train the configured task")
    common(sp)
    sp.add_argument("--resume", metavar="CHECKPOINT", help="continue an interrupted run from a checkpoint")

    for name, helptext in (("eval", "metrics of a checkpoint on the test set"),
                           ("sample", "decode random latent vectors of a VAE checkpoint"),
                           ("invert", "reconstruct one image from its features"),
                           ("reencode", "iterate image -> features -> image"),
                           ("interpolate", "decode linear interpolations between two images' features")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, checkpoint=True)
        if name in ("invert", "interpolate"):
            sp.add_argument("--image", action="append", default=[], help="PPM/PGM input image")
        if name in ("reencode", "interpolate", "sample"):
            sp.add_argument("--steps", type=int, default=8,
                            help="re-encoding iterations / interpolation steps / sample count")

    sp = sub.add_parser("ablate", help="inversion runs with loss terms removed")
    common(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every operation and loss")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _overrides(args) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in args.override:
        if "=" not in item:
            raise UsageError(f"--override expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in config_mod.KEYS:
            raise ConfigError(f"unknown key {key!r}")
        out[config_mod.KEYS[key]] = value
    for flag, attr in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[attr] = str(value)
    return out


def _config(args, checkpoint_path=None) -> tuple[ExperimentConfig, object]:
    """Resolved config and, when a checkpoint is involved, the loaded checkpoint."""
    overrides = _overrides(args)
    ckpt = None
    if checkpoint_path is not None:
        ckpt = load_checkpoint(checkpoint_path, override=True)
    if args.config:
        cfg = config_mod.load(args.config, overrides)
    elif ckpt is not None:
        cfg = config_mod.resolve(config_mod.parse_text(ckpt.config_text, f"{checkpoint_path} (embedded config)"),
                                 overrides)
    else:
        raise UsageError("--config is required")
    if ckpt is not None:
        # repeat the checks now that the expected hash is known
        ckpt = load_checkpoint(checkpoint_path, config_mod.config_hash(cfg), override=args.force)
    return cfg, ckpt


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(cfg, ckpt) -> Experiment:
    exp = Experiment(cfg)
    if ckpt is not None:
        restore(exp, ckpt)
    return exp


def _write_eval(exp: Experiment, out: Path) -> MetricRow:
    row = exp.evaluate()
    atomic_write(out / "run.txt", config_mod.dump(exp.cfg).encode())
    MetricTable([row]).write(out / "metrics.csv")
    logger.info("%s: image error %.2f%%, feature error %.2f%% at iteration %d",
                row.label, row.img_err_pct, row.feat_err_pct, row.iteration)
    return row


def cmd_train(args) -> int:
    if args.resume and (args.seed is not None or args.scale is not None):
        raise UsageError("--resume continues a run with its own seed and scale; drop --seed/--scale")
    cfg, ckpt = _config(args, args.resume)
    out = _out(cfg)
    exp = _experiment(cfg, ckpt)
    if ckpt is not None:
        logger.info("resuming %s at iteration %d", args.resume, ckpt.iteration)
    try:
        result = RUNNERS[cfg.task](cfg, out, experiment=exp)
    except TrainingDiverged as exc:
        logger.error("training diverged at iteration %d; metrics and last periodic checkpoint kept in %s",
                     exc.iteration, out)
        raise
    row = result.table.last()
    logger.info("%s: image error %.2f%%, feature error %.2f%% after %d iterations (outputs in %s)",
                row.label, row.img_err_pct, row.feat_err_pct, row.iteration, out)
    return 0


def _needs_checkpoint(args) -> None:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    if args.iters is not None:
        raise UsageError(f"--iters has no effect on {args.command}")


def cmd_eval(args) -> int:
    _needs_checkpoint(args)
    cfg, ckpt = _config(args, args.checkpoint)
    exp = _experiment(cfg, ckpt)
    out = _out(cfg)
    _write_eval(exp, out)
    write_grid(exp.reconstruction_grid(), 8, out / "reconstructions.ppm")
    return 0


def cmd_sample(args) -> int:
    _needs_checkpoint(args)
    cfg, ckpt = _config(args, args.checkpoint)
    if cfg.task != "vae":
        raise UsageError(f"sample needs a vae checkpoint, this one is task {cfg.task!r}")
    exp = _experiment(cfg, ckpt)
    out = _out(cfg)
    _write_eval(exp, out)
    samples = exp.sample_grid(args.steps)
    bad = [i for i, im in enumerate(samples) if not np.all(np.isfinite(im.pixels))]
    if bad:
        raise FloatingPointError(f"samples {bad} contain non-finite pixels")
    write_grid(samples, 8, out / "samples.ppm")
    logger.info("wrote %d samples to %s", len(samples), out / "samples.ppm")
    return 0


def _need_inversion(cfg: ExperimentConfig, command: str) -> None:
    if cfg.task != "inversion":
        raise UsageError(f"{command} needs an inversion checkpoint, this one is task {cfg.task!r}")


def _load_images(paths, cfg: ExperimentConfig) -> np.ndarray:
    arrays = []
    for p in paths:
        rec = read_image(p)
        if (rec.width, rec.height) != (cfg.image_size, cfg.image_size) or rec.channels != 3:
            raise ImageFormatError(f"{p}: need a {cfg.image_size}x{cfg.image_size} color image, "
                                   f"got {rec.width}x{rec.height}x{rec.channels}")
        arrays.append(rec.chw())
    return np.stack(arrays)


def cmd_invert(args) -> int:
    _needs_checkpoint(args)
    if len(args.image) != 1:
        raise UsageError("invert takes exactly one --image")
    cfg, ckpt = _config(args, args.checkpoint)
    _need_inversion(cfg, "invert")
    exp = _experiment(cfg, ckpt)
    out = _out(cfg)
    _write_eval(exp, out)
    image = _load_images(args.image, cfg)
    recon = exp.reconstruct(image)
    write_grid([ImageRecord.from_chw(image[0]), ImageRecord.from_chw(recon[0])], 2, out / "inversion.ppm")
    logger.info("wrote %s", out / "inversion.ppm")
    return 0


def cmd_reencode(args) -> int:
    _needs_checkpoint(args)
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    cfg, ckpt = _config(args, args.checkpoint)
    _need_inversion(cfg, "reencode")
    exp = _experiment(cfg, ckpt)
    out = _out(cfg)
    _write_eval(exp, out)
    images = exp.images.test_images(cfg.image_size)
    gen, phi, flat_phi = inversion_functions(exp)
    iterates, errors = iterative_reencode(gen, phi, images, args.steps, flat_phi)
    img_errors = [normalized_error(x, images) for x in iterates]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "img_err_pct", "feat_err_pct"])
    for k, (ie, fe) in enumerate(zip(img_errors, errors), start=1):
        writer.writerow([k, f"{ie:.6f}", f"{fe:.6f}"])
    atomic_write(out / "reencode.csv", buf.getvalue().encode())
    count = min(8, len(images))
    grid = []
    for i in range(count):
        grid.append(ImageRecord.from_chw(images[i]))
        grid.extend(ImageRecord.from_chw(x[i]) for x in iterates)
    write_grid(grid, args.steps + 1, out / "reencode.ppm")
    logger.info("feature error by iteration: %s", ", ".join(f"{e:.1f}%" for e in errors))
    return 0


def cmd_interpolate(args) -> int:
    _needs_checkpoint(args)
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    if len(args.image) not in (0, 2):
        raise UsageError("interpolate takes two --image flags (or none to use the first two test images)")
    cfg, ckpt = _config(args, args.checkpoint)
    _need_inversion(cfg, "interpolate")
    exp = _experiment(cfg, ckpt)
    out = _out(cfg)
    _write_eval(exp, out)
    pair = _load_images(args.image, cfg) if args.image else exp.images.test_images(cfg.image_size)[:2]
    frames = decode_interpolation(exp, pair[0], pair[1], args.steps)
    records = [ImageRecord.from_chw(pair[0])] + [ImageRecord.from_chw(f) for f in frames]
    records.append(ImageRecord.from_chw(pair[1]))
    write_grid(records, len(records), out / "interpolation.ppm")
    logger.info("wrote %s", out / "interpolation.ppm")
    return 0


def cmd_ablate(args) -> int:
    cfg, _ = _config(args)
    out = _out(cfg)
    table, _grid = ablation_matrix(cfg, out)
    for row in table.rows:
        logger.info("%-14s image %.2f%%  feature %.2f%%", row.label, row.img_err_pct, row.feat_err_pct)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed, echo=print)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "reencode": cmd_reencode,
    "interpolate": cmd_interpolate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"deepsim {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetError, ImageFormatError, TrainingDiverged, NonFiniteGradient,
            FloatingPointError, OSError, ValueError, KeyError) as exc:
        print(f"deepsim {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
