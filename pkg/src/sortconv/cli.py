"""Command-line entry point: ``sortconv {train,eval-rot,audit,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariance-audit
failure.

``train`` reads a JSON config. Recognised keys (all others are rejected)::

    variant        required, e.g. "P-RS-3" or "baseline-5"
    mnist_dir      directory with the four MNIST IDX files
    out_dir        where best.ckpt, final.ckpt, history.csv, config.json go
    train_subset   train on this many images of the training split (null = all)
    valid_count    images held out for validation (default 10000)
    dtype          "float32" (default) or "float64"
    phase          polar sampling phase in radians (default 0)
    epochs, batch_size, lr0, lr_decay, decay_every, seed,
    adam_beta1, adam_beta2, adam_eps      training schedule and optimiser
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from ._config import set_deterministic
from .audit import DEFAULT_BANDWIDTH, DEFAULT_TOLERANCE, run_audit
from .dataset import (
    PAPER_ANGLES, load_mnist, load_rot_cache, rotate_images, save_rot_cache, split_train_valid,
)
from .errors import ConfigurationError, ParseError, ShapeError, TrainingError
from .models import build_model, load_model, parse_variant
from .reports import RunReport, merge_reports
from .trainer import TrainConfig, evaluate_shards, train
from .validation import parse_angles

log = logging.getLogger("sortconv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AUDIT = 0, 1, 2, 3
DEFAULT_EVAL_SUBSET = 1000

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_CONFIG_KEYS = _TRAIN_KEYS | {"variant", "mnist_dir", "out_dir", "train_subset",
                              "valid_count", "dtype", "phase"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means a data error here.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# train --------------------------------------------------------------------

def load_train_config(path):
    """Read and validate a train config; returns a plain dict."""
    if not os.path.exists(path):
        raise UsageError(f"config file {path!r} does not exist")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(cfg) - _CONFIG_KEYS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    if "variant" not in cfg:
        raise UsageError(f"{path}: missing required key 'variant'")
    try:
        parse_variant(cfg["variant"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if cfg.get("dtype", "float32") not in ("float32", "float64"):
        raise UsageError(f"{path}: dtype must be 'float32' or 'float64'")
    return cfg


def cmd_train(args):
    cfg = load_train_config(args.config)
    if args.mnist_dir:
        cfg["mnist_dir"] = args.mnist_dir
    if args.out:
        cfg["out_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.subset is not None:
        cfg["train_subset"] = args.subset
    if not cfg.get("mnist_dir"):
        raise UsageError("no MNIST directory: set 'mnist_dir' or pass --mnist-dir")
    config = TrainConfig(**{k: v for k, v in cfg.items() if k in _TRAIN_KEYS})
    out_dir = cfg.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    images, labels = _load_split(cfg["mnist_dir"], "train")
    (x_tr, y_tr), valid = split_train_valid(images, labels, cfg.get("valid_count", 10000),
                                            seed=config.seed)
    subset = cfg.get("train_subset")
    if subset:
        idx = np.sort(np.random.default_rng(config.seed).permutation(len(y_tr))[:subset])
        x_tr, y_tr = x_tr[idx], y_tr[idx]
    model = build_model(cfg["variant"], seed=config.seed, dtype=cfg.get("dtype", "float32"),
                        phase=cfg.get("phase", 0.0))
    log.info("training %s on %d images (%d validation)", model.name, len(y_tr), len(valid[1]))
    start = time.perf_counter()
    result = train(model, (x_tr, y_tr), valid, config,
                   checkpoint_path=os.path.join(out_dir, "best.ckpt"))
    seconds = time.perf_counter() - start
    model.save(os.path.join(out_dir, "final.ckpt"), epoch=config.epochs - 1,
               train_config=asdict(config))
    result.write_history(os.path.join(out_dir, "history.csv"))
    echo = dict(cfg, resolved_train_config=asdict(config), seconds=seconds,
                best_epoch=result.best_epoch, best_valid_accuracy=result.best_valid_accuracy,
                train_images=int(len(y_tr)), package_version=__version__)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(echo, fh, indent=2)
    print(f"{model.name}: best epoch {result.best_epoch}, "
          f"valid accuracy {result.best_valid_accuracy:.4f}, {seconds:.0f}s -> {out_dir}")
    return EXIT_OK


# eval-rot -----------------------------------------------------------------

def _load_split(mnist_dir, split):
    try:
        return load_mnist(mnist_dir, split)
    except (FileNotFoundError, ParseError) as exc:
        raise DataError(str(exc)) from None


def rotated_shards(images, labels, angles, cache=None):
    """``[(rotated images, labels), ...]`` per angle, optionally via an MROT cache."""
    if cache and os.path.exists(cache):
        stack, all_labels, stored = load_rot_cache(cache, angles)
        n = len(labels)
        if len(all_labels) != n * len(angles) or not np.array_equal(all_labels[:n], labels):
            raise DataError(f"{cache}: cached images do not match the requested subset")
        return [(stack[i * n:(i + 1) * n], labels) for i in range(len(stored))]
    shards = [(rotate_images(images, a), labels) for a in angles]
    if cache:
        save_rot_cache(cache, np.concatenate([s[0] for s in shards]), labels, angles)
    return shards


def evaluate_rotations(model, images, labels, angles, cache=None):
    """Per-angle ``(correct, total)`` lists for ``model``."""
    shards = rotated_shards(images, labels, angles, cache)
    results = evaluate_shards(model, shards)
    correct = [int(c.sum()) for _, c, _ in results]
    total = [int(t.sum()) for _, _, t in results]
    return correct, total


def cmd_eval_rot(args):
    if not args.checkpoint:
        raise UsageError("eval-rot needs --checkpoint")
    if not args.mnist_dir:
        raise UsageError("eval-rot needs --mnist-dir")
    angles = parse_angles(args.angles) if args.angles else list(PAPER_ANGLES)
    try:
        model, meta = load_model(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    images, labels = _load_split(args.mnist_dir, "test")
    if not args.full:
        n = args.subset if args.subset is not None else DEFAULT_EVAL_SUBSET
        images, labels = images[:n], labels[:n]
    start = time.perf_counter()
    correct, total = evaluate_rotations(model, images, labels, angles, args.cache)
    report = RunReport(model.name, angles, correct, total,
                       config={"checkpoint": os.path.abspath(args.checkpoint),
                               "subset": int(len(labels)), "checkpoint_meta": meta},
                       seed=args.seed or 0, seconds=time.perf_counter() - start,
                       package_version=__version__)
    prefix = args.out or os.path.splitext(args.checkpoint)[0] + "_rot"
    csv_path, json_path = report.write(prefix)
    for angle, acc in zip(report.angles, report.accuracies):
        print(f"{angle:4d} deg  {acc:.4f}")
    print(f"{model.name}: aggregate {report.aggregate:.4f}, spread {report.spread:.4f} "
          f"-> {csv_path}, {json_path}")
    return EXIT_OK


# audit --------------------------------------------------------------------

def cmd_audit(args):
    if not args.variant:
        raise UsageError("audit needs --variant")
    try:
        spec = parse_variant(args.variant)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if spec.kind != "scnn":
        raise UsageError(f"{spec.name} has no invariance to audit; choose an SCNN variant")
    digits = None
    if args.mnist_dir:
        digits = _load_split(args.mnist_dir, "test")[0][:100]
    report = run_audit(spec.name, seed=args.seed or 0, n_images=args.images,
                       tolerance=args.tolerance, bandwidth=args.bandwidth, angle=args.angle,
                       phase=args.phase, digits=digits)
    for c in report.checks:
        flag = "ok  " if c.passed else "FAIL"
        print(f"{flag} {c.kind:6s} {c.name:24s} residual={c.residual:.3e} "
              f"tol={c.tolerance:.1e} at={c.worst_index}")
    if args.out:
        report.write_json(args.out)
    if not report.passed:
        for c in report.failures():
            print(f"exact check {c.name} failed at index {c.worst_index}", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


# report -------------------------------------------------------------------

def cmd_report(args):
    if not args.out:
        raise UsageError("report needs --out")
    try:
        rows = merge_reports(args.inputs, args.out)
    except ParseError as exc:
        raise DataError(str(exc)) from None
    print(f"{rows} rows -> {args.out}")
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed override")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, order-stable arithmetic")
    common.add_argument("--out", default=None, help="output path or directory")
    common.add_argument("--mnist-dir", default=None, help="directory with the MNIST IDX files")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="sortconv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--subset", type=int, default=None, help="training images to use")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rot", parents=[common], help="accuracy per rotation angle")
    p.add_argument("--checkpoint", help="model checkpoint to evaluate")
    p.add_argument("--angles", default=None, help="'0,90,180' or 'start:stop:step'")
    p.add_argument("--subset", type=int, default=None,
                   help=f"test images per angle (default {DEFAULT_EVAL_SUBSET})")
    p.add_argument("--full", action="store_true", help="use all 10000 test images")
    p.add_argument("--cache", default=None, help="MROT cache file to read or create")
    p.set_defaults(func=cmd_eval_rot)

    p = sub.add_parser("audit", parents=[common], help="rotation-invariance audit")
    p.add_argument("--variant", help="SCNN variant, e.g. P-RS-3")
    p.add_argument("--images", type=int, default=8, help="random images per check")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE,
                   help="relative tolerance at arbitrary angles")
    p.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH,
                   help="test image bandwidth in rad/px")
    p.add_argument("--angle", type=float, default=37.0, help="arbitrary test angle in degrees")
    p.add_argument("--phase", type=float, default=0.0, help="polar sampling phase in radians")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", parents=[common], help="merge report files into one CSV")
    p.add_argument("inputs", nargs="*", help="report CSV/JSON files and history CSVs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("sortconv: choose a command (train, eval-rot, audit, report)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        if args.deterministic:
            set_deterministic(True)
        return args.func(args)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, ShapeError, FileNotFoundError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
