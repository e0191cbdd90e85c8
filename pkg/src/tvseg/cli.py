"""``tvseg`` command line: synth, train, sweep, prcurve, predict, compare, gradcheck.

Exit codes: 0 success, 1 training failure, 2 config error, 3 data error,
4 checkpoint error. ``TVSEG_THREADS`` caps BLAS threads (0 or unset: one
thread, the deterministic reference mode).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import gradcheck
from . import metrics as M
from . import model as net
from . import trainer as tr
from .errors import CheckpointError, ConfigError, DataError, DimensionError, NotComputable, TrainingError

log = logging.getLogger("tvseg")

EXIT_OK, EXIT_TRAIN, EXIT_CONFIG, EXIT_DATA, EXIT_CKPT = 0, 1, 2, 3, 4
COMPARE_TARGETS = (0.975, 0.945, 0.91, 0.85)
GRADCHECK_EXIT_TOL = 1e-4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def thread_limit():
    n = int(os.environ.get("TVSEG_THREADS", "0") or 0)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=max(n, 1))


def parse_thresholds(text: str) -> list[float]:
    """``"0.1:0.8:0.1"`` (inclusive range), ``"0.1,0.3"`` or ``"0.3"``; empty string gives []."""
    text = text.strip()
    if not text:
        return []
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError
            count = int(round((hi - lo) / step)) + 1
            values = [round(lo + i * step, 10) for i in range(max(count, 0))]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"cannot parse threshold list {text!r}")
    bad = [v for v in values if not 0 <= v <= 1]
    if bad:
        raise CliError(EXIT_CONFIG, f"thresholds must lie in [0, 1], got {bad}")
    return values


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def load_config(path) -> tr.TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CliError(EXIT_CONFIG, f"{path}: invalid JSON: {e}")
    try:
        return tr.TrainConfig.from_dict(raw)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, f"{path}: {e}")


def load_ckpt(path):
    try:
        return net.load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(EXIT_CKPT, str(e))


def load_eval_data(root, unet: net.UNetConfig, manifest=None, split_name="test", resize=False) -> D.Dataset:
    try:
        ds = D.load_dataset_dir(root)
        if manifest:
            m = D.split(ds, D.ByManifest(manifest))
            ds = ds.subset(m[split_name])
    except (DataError, KeyError) as e:
        raise CliError(EXIT_DATA, f"{root}: {e}")
    if resize:
        ds = D.resize_dataset(ds, unet.input_size)
    for s in ds:
        if s.image.shape != tuple(unet.input_size):
            raise CliError(EXIT_CKPT, f"sample {s.name} is {s.image.shape} but the checkpoint expects "
                                      f"{tuple(unet.input_size)} (use --resize)")
    return ds


def build_datasets(config: tr.TrainConfig) -> tuple[D.Dataset, D.Dataset, D.Dataset, D.SplitManifest]:
    dc = config.data
    if dc.source == "synth":
        h, w = config.unet.input_size
        if h != w:
            raise ConfigError("synthetic data needs a square input_size")
        total = dc.n_train + dc.n_val + dc.n_test
        ds = D.synth_blobs(total, h, dc.blob_count_range, dc.noise_sigma, D.derive_seed(config.seed, "synth"))
        names = ds.names
        manifest = D.SplitManifest(
            {"train": names[:dc.n_train], "val": names[dc.n_train:dc.n_train + dc.n_val],
             "test": names[dc.n_train + dc.n_val:]},
            {"kind": "synthetic", "counts": [dc.n_train, dc.n_val, dc.n_test]},
        )
    else:
        ds = D.resize_dataset(D.load_dataset_dir(dc.path), config.unet.input_size)
        if dc.split == "fraction":
            policy = D.ByFraction(dc.fractions, D.derive_seed(config.seed, "split"))
        elif dc.split == "group":
            policy = D.ByGroup(dc.group_assignment)
        else:
            policy = D.ByManifest(dc.manifest)
        manifest = D.split(ds, policy)
    return ds.subset(manifest["train"]), ds.subset(manifest["val"]), ds.subset(manifest["test"]), manifest


def run_metadata(config: tr.TrainConfig) -> dict:
    return {
        "tool": "tvseg",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "started": datetime.now(timezone.utc).isoformat(),
        "host": {"python": platform.python_version(), "numpy": np.__version__,
                 "machine": platform.machine(), "system": platform.system(),
                 "threads": int(os.environ.get("TVSEG_THREADS", "0") or 0)},
        "checkpoint_policy": "best.ckpt = lowest validation loss; last.ckpt = final epoch",
    }


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out)
    try:
        train, val, test, manifest = build_datasets(config)
    except ConfigError as e:
        raise CliError(EXIT_CONFIG, f"{args.config}: {e}")
    except DataError as e:
        raise CliError(EXIT_DATA, str(e))
    if len(train) == 0 or len(val) == 0:
        raise CliError(EXIT_DATA, "training and validation splits must be non-empty")
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", config.to_json())
    write_text(out / "metadata.json", json.dumps(run_metadata(config), sort_keys=True, indent=2) + "\n")
    write_text(out / "split.json", manifest.to_json())
    try:
        result = tr.fit(config, train, val, run_dir=out)
    except TrainingError as e:
        raise CliError(EXIT_TRAIN, f"training failed: {e}")
    except DimensionError as e:
        raise CliError(EXIT_DATA, str(e))
    lines = [f"stop_reason={result.stop_reason}", f"epochs={len(result.history)}"]
    if len(test):
        ev = tr.evaluate(result.best_params, config.unet, test, M.DEFAULT_THRESHOLDS)
        write_text(out / "test_sweep.csv", M.sweep_csv(ev.reports))
        at = tr.evaluate(result.best_params, config.unet, test, [config.test_threshold]).reports[0]
        lines.append(f"test_dice@{config.test_threshold}={M.fmt(at.dice)}")
    write_text(out / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(args) -> int:
    params, unet = load_ckpt(args.ckpt)
    thresholds = parse_thresholds(args.thresholds)
    ds = load_eval_data(args.data, unet, args.manifest, args.split, args.resize)
    reports = tr.evaluate(params, unet, ds, thresholds).reports
    text = M.sweep_csv(reports)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_prcurve(args) -> int:
    params, unet = load_ckpt(args.ckpt)
    ds = load_eval_data(args.data, unet, args.manifest, args.split, args.resize)
    ev = tr.evaluate(params, unet, ds, [])
    if ev.curve is None:
        raise CliError(EXIT_DATA, "PR curve undefined: no foreground pixels in the ground truth")
    write_text(args.out_csv, M.pr_csv(ev.curve))
    if args.out_svg:
        write_text(args.out_svg, M.pr_svg(ev.curve))
    print(f"AP={M.fmt(ev.average_precision)} points={len(ev.curve)}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, unet = load_ckpt(args.ckpt)
    if not 0 <= args.threshold <= 1:
        raise CliError(EXIT_CONFIG, f"threshold must lie in [0, 1], got {args.threshold}")
    src = Path(args.images)
    if not src.is_dir():
        raise CliError(EXIT_DATA, f"not a directory: {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() in D.IMAGE_EXTS)
    failures = 0
    for path in files:
        try:
            img = D.read_image(path) / 255.0
        except (DataError, OSError) as e:
            log.warning("skipping %s: %s", path.name, e)
            failures += 1
            continue
        x = D.bilinear(img, unet.input_size) if img.shape != tuple(unet.input_size) else img
        prob = net.predict(params, unet, x[None, None]).foreground[0]
        mask = M.binarize(prob, args.threshold)
        if mask.shape != img.shape:
            mask = D.nearest(mask, img.shape)
        D.write_pgm(out / (path.stem + ".pgm"), D.to_uint8_mask(mask))
    if files and failures == len(files):
        return EXIT_DATA
    return EXIT_OK


def cmd_compare(args) -> int:
    runs = []
    for ckpt in (args.ckpt_a, args.ckpt_b):
        params, unet = load_ckpt(ckpt)
        ds = load_eval_data(args.data, unet, args.manifest, args.split, args.resize)
        probs = tr.predict_dataset(params, unet, ds)
        gts = [s.mask.astype(bool) for s in ds]
        try:
            curve = M.pr_curve(list(probs), gts)
        except NotComputable as e:
            raise CliError(EXIT_DATA, str(e))
        runs.append((Path(ckpt).name, probs, gts, curve))
    targets = parse_thresholds(args.recall_targets)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("target_recall", "model", "threshold", "recall", "precision", "miou", "dice"))
    for model_idx, (name, probs, gts, curve) in enumerate(runs):
        label = "a" if model_idx == 0 else "b"
        for t in targets:
            hit = M.matched_recall_threshold(curve, t, args.tolerance)
            if hit is None:
                w.writerow((M.fmt(t), label, "not-achievable", "", "", "", ""))
                continue
            r = M.report_at(list(probs), gts, hit[0])
            w.writerow((M.fmt(t), label, M.fmt(hit[0]), M.fmt(r.recall), M.fmt(r.precision),
                        M.fmt(r.miou), M.fmt(r.dice)))
    if args.out:
        write_text(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    # exit status uses one threshold; the per-kind tolerances are reported alongside
    rows = gradcheck.run_all(args.seed, corrupt=args.corrupt)
    ok = True
    for name, err, tol in rows:
        ok &= err < GRADCHECK_EXIT_TOL
        print(f"{name:16s} max_rel_err={err:.3e} tol={tol:.0e} {'PASS' if err < tol else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TRAIN


def cmd_synth(args) -> int:
    if args.n < 0 or args.size < 8:
        raise CliError(EXIT_CONFIG, "--n must be >= 0 and --size >= 8")
    ds = D.synth_blobs(args.n, args.size, (args.min_blobs, args.max_blobs), args.noise, args.seed)
    D.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _eval_data_args(p):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory with images/ and masks/ (and optional groups.csv)")
    p.add_argument("--manifest", help="split file (JSON or name,split CSV) selecting the evaluated samples")
    p.add_argument("--split", default="test", help="split to evaluate when --manifest is given")
    p.add_argument("--resize", action="store_true", help="resize samples to the checkpoint input size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tvseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a U-Net from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="metrics over a grid of cut-off thresholds")
    _eval_data_args(p)
    p.add_argument("--thresholds", default="0.1:0.8:0.1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prcurve", help="pooled precision-recall curve and average precision")
    _eval_data_args(p)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-svg")
    p.set_defaults(func=cmd_prcurve)

    p = sub.add_parser("predict", help="write binary PGM masks for a folder of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="compare two checkpoints at matched recall")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--resize", action="store_true")
    p.add_argument("--recall-targets", default=",".join(str(t) for t in COMPARE_TARGETS))
    p.add_argument("--tolerance", type=float, default=0.02, help="max |achieved - target| recall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic blob dataset as PGM pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--min-blobs", type=int, default=1)
    p.add_argument("--max-blobs", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except CliError as e:
        print(f"tvseg {args.command}: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"tvseg {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"tvseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
