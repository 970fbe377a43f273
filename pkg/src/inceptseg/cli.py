"""``inceptseg`` command line.

Exit codes: 0 success, 1 a check ran and failed (audit tolerance, gradient
check), 2 configuration or validation error, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import data, gradcheck, metrics
from .checkpoint import load_checkpoint
from .errors import (CheckpointError, ConfigError, DecodeError, NumericalError, ShapeError,
                     SpecMismatchError, ValidationError)
from .network import build_model, count_parameters, format_audit
from .training import TrainConfig, predict, train

log = logging.getLogger("inceptseg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
SYNTHETIC_FILTERS = (8, 16, 32, 64)
# Training defaults for --synthetic runs without a config file: small batches and a
# larger step so 16 images are fitted within a few hundred epochs.
SYNTHETIC_TRAIN = {"learning_rate": 3e-3, "batch_size": 4}


def _filters(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _network_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=("inceptnet", "bcdu", "unet"))
    p.add_argument("--d", type=int, choices=(1, 3))
    p.add_argument("--filters", type=_filters, help="four comma-separated widths, e.g. 8,16,32,64")
    p.add_argument("--input-size", type=int, help="square input side (multiple of 8)")
    p.add_argument("--channels", type=int, help="input channels")
    p.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # given before or after the subcommand; the subcommand copy must not
        # overwrite a value parsed at the top level, hence SUPPRESS there
        g = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
        g.add_argument("--config", type=Path, help="JSON run configuration")
        g.add_argument("--seed", type=int, help="master seed (overrides network and training seeds)")
        g.add_argument("--out", type=Path, help="output directory")
        g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
        return g

    parser = argparse.ArgumentParser(prog="inceptseg", description="InceptNet / BCDU-net segmentation engine",
                                     parents=[global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub_flags = global_flags(True)
    add = lambda name, text: sub.add_parser(name, help=text, parents=[sub_flags])  # noqa: E731

    p = add("audit", "per-layer parameter counts")
    _network_flags(p)
    p.add_argument("--expect", type=int, help="reference total to compare against")
    p.add_argument("--tol", type=float, default=0.05, help="allowed relative deviation from --expect")

    p = add("train", "train a model and keep the best checkpoint")
    _network_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--synthetic", choices=("small", "large"))
    src.add_argument("--data", type=Path, help="dataset root with images/ and masks/")
    p.add_argument("--size", type=int, help="synthetic image side")
    p.add_argument("--count", type=int, help="synthetic training images")
    p.add_argument("--val-count", type=int, help="synthetic validation images")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)

    p = add("predict", "write probability maps and binary masks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image directory (or a root holding images/)")
    p.add_argument("--threshold", type=float)

    p = add("eval", "metrics of predicted masks against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="directory of binary masks")
    p.add_argument("--truth", type=Path, required=True, help="directory of ground-truth masks")
    p.add_argument("--scores", type=Path, help="directory of 16-bit probability maps (enables AUC/ROC)")
    p.add_argument("--macro", action="store_true", help="also report the per-image average")

    p = add("gradcheck", "finite-difference gradient verification")
    p.add_argument("--scope", choices=("op", "graph"), default="op")
    p.add_argument("--variant", choices=("inceptnet", "bcdu", "unet"), default="inceptnet")
    p.add_argument("--d", type=int, choices=(1, 3), default=1)

    p = add("synth", "write a synthetic dataset to disk")
    p.add_argument("--scale", choices=("small", "large"), default="small")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    return parser


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> cfgmod.RunConfig:
    """File values, then command-line overrides; validated."""
    base = cfgmod.load(args.config).to_dict()
    net, train_cfg, source = {}, {}, {}
    preset = bool(getattr(args, "synthetic", None)) and args.config is None
    if getattr(args, "synthetic", None):
        source = {"synthetic": args.synthetic, "root": None}
        net["base_filters"] = list(SYNTHETIC_FILTERS)
    if getattr(args, "data", None):
        source = {"root": str(args.data), "synthetic": None}
    for flag, key in (("size", "size"), ("count", "count"), ("val_count", "val_count")):
        source[key] = getattr(args, flag, None)
    for flag, key in (("variant", "variant"), ("d", "d"), ("dropout", "dropout_rate")):
        net[key] = getattr(args, flag, None)
    if getattr(args, "filters", None):
        net["base_filters"] = list(args.filters)
    for flag, key in (("max_epochs", "max_epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("patience", "patience"), ("min_delta", "min_delta")):
        train_cfg[key] = getattr(args, flag, None)
    if preset:
        for key, value in SYNTHETIC_TRAIN.items():
            if train_cfg.get(key) is None:
                train_cfg[key] = value
        # a fitting run is never cut short by validation plateaus unless asked
        if train_cfg.get("patience") is None:
            train_cfg["patience"] = train_cfg.get("max_epochs") or TrainConfig().max_epochs
    if args.seed is not None:
        net["seed"] = train_cfg["seed"] = args.seed
    doc = cfgmod.merge(base, {"source": source, "network": net, "train": train_cfg,
                              "output_dir": str(args.out) if args.out else None})
    # explicit setting replaces null source fields left by the merge
    for k in ("root", "synthetic"):
        if k in source:
            doc["source"][k] = source[k]
    size = getattr(args, "input_size", None)
    channels = getattr(args, "channels", None)
    shape = list(doc["network"]["input_shape"])
    if doc["source"].get("synthetic"):
        side = doc["source"].get("size", 64)
        shape = [side, side, 1]
    if size is not None:
        shape[0] = shape[1] = size
    if channels is not None:
        shape[2] = channels
    doc["network"]["input_shape"] = shape
    return cfgmod.from_dict(doc)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_audit(args, out=sys.stdout) -> int:
    cfg = resolve_config(args)
    total, rows = count_parameters(build_model(cfg.network))
    print(format_audit(total, rows), file=out)
    bad = [r.name for r in rows if r.count != r.closed_form]
    if bad:
        print(f"closed-form mismatch in: {', '.join(bad)}", file=out)
        return EXIT_CHECK_FAILED
    if args.expect is not None:
        if args.expect <= 0:
            raise ConfigError("--expect must be positive")
        gap = (total - args.expect) / args.expect
        ok = abs(gap) <= args.tol
        print(f"expected {args.expect:,}  got {total:,}  gap {gap:+.2%}  tolerance {args.tol:.0%}  "
              f"{'PASS' if ok else 'FAIL'}", file=out)
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    return EXIT_OK


def load_training_data(cfg: cfgmod.RunConfig):
    src = cfg.source
    if src.synthetic:
        tr = data.generate_synthetic(src.count, src.size, src.synthetic, cfg.train.seed)
        va = data.generate_synthetic(src.val_count, src.size, src.synthetic, cfg.train.seed + 1)
        return data.stack(tr), data.stack(va)
    grayscale = cfg.network.input_shape[2] == 1
    if src.train_names is not None and src.val_names is not None:
        tr = data.load_directory(src.root, grayscale, src.train_names)
        va = data.load_directory(src.root, grayscale, src.val_names)
    else:
        tr, va = data.split_train_val(data.load_directory(src.root, grayscale), cfg.dataset.val_fraction,
                                      cfg.train.seed)
    return data.prepare(tr, cfg.dataset, cfg.train.seed), data.prepare(va, cfg.dataset, cfg.train.seed + 1)


def cmd_train(args, out=sys.stdout) -> int:
    cfg = resolve_config(args)
    if cfg.source.root is None and cfg.source.synthetic is None:
        raise ConfigError("train needs --synthetic SCALE or --data DIR (or a source in --config)")
    cfg.validate()
    train_set, val_set = load_training_data(cfg)
    if train_set[0].shape[1:] != cfg.network.input_shape:
        raise ConfigError(f"training samples are {train_set[0].shape[1:]}, network expects "
                          f"{cfg.network.input_shape}")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out_dir)
    ckpt, logs = train(build_model(cfg.network), train_set, val_set, cfg.train, out_dir)
    best = min(logs, key=lambda e: e.val_loss)
    last = logs[-1]
    print(f"epochs {len(logs)}  train_loss {last.train_loss:.5f}  train_acc {last.train_accuracy:.4f}  "
          f"best val_loss {best.val_loss:.5f} (epoch {best.epoch})  checkpoint {ckpt}", file=out)
    return EXIT_OK


def _image_dir(path: Path) -> Path:
    return path / "images" if (path / "images").is_dir() else path


def _stem_map(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise ConfigError(f"{folder} is not a directory")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in data.IMAGE_SUFFIXES}


def cmd_predict(args, out=sys.stdout) -> int:
    model = load_checkpoint(args.checkpoint)
    threshold = 0.5 if args.threshold is None else args.threshold
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    files = _stem_map(_image_dir(args.input))
    if not files:
        raise ConfigError(f"no images found under {args.input}")
    out_dir = args.out or Path("predictions")
    (out_dir / "probs").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    h, w, c = model.spec.input_shape
    for stem, path in files.items():
        img = data.load_image(path)
        if c == 1 and img.shape[2] == 3:
            img = data.to_grayscale(img)
        if img.shape != (h, w, c):
            raise ShapeError(f"{path.name} is {img.shape}, checkpoint expects {(h, w, c)}")
        p = predict(model, img[None])[0]
        data.save_probability_map(out_dir / "probs" / f"{stem}.pgm", p)
        data.save_mask(out_dir / "masks" / f"{stem}.pgm", p >= threshold)
    print(f"wrote {len(files)} probability maps and masks to {out_dir}", file=out)
    return EXIT_OK


def _read_scores(path: Path) -> np.ndarray:
    img = data.read_netpbm(path.read_bytes())
    return img.pixels.astype(np.float64) / img.maxval


def cmd_eval(args, out=sys.stdout) -> int:
    pred, truth = _stem_map(args.pred), _stem_map(args.truth)
    scores = _stem_map(args.scores) if args.scores else None
    unmatched = sorted(set(pred) ^ set(truth))
    if scores is not None:
        unmatched = sorted(set(unmatched) | (set(pred) ^ set(scores)))
    if unmatched:
        raise ConfigError(f"unmatched stems: {', '.join(unmatched)}")
    if not pred:
        raise ConfigError(f"no masks found in {args.pred}")
    items = []
    for stem in pred:
        p = data.binarize_mask(data.load_image(pred[stem])) > 0
        t = data.binarize_mask(data.load_image(truth[stem])) > 0
        if p.shape != t.shape:
            raise ShapeError(f"{stem}: prediction {p.shape} vs truth {t.shape}")
        s = _read_scores(scores[stem]) if scores is not None else None
        items.append((p, t, s))
    micro = metrics.report(np.stack([i[0] for i in items]), np.stack([i[1] for i in items]),
                           None if scores is None else np.stack([i[2] for i in items]))
    rows = [micro.as_row(average="micro")]
    if args.macro:
        rows.append(metrics.macro_report(items).as_row(average="macro"))
    out_dir = args.out or Path("evaluation")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_reports_csv(out_dir / "metrics.csv", rows)
    if micro.roc is not None:
        metrics.write_roc_csv(out_dir / "roc.csv", micro.roc)
    for row in rows:
        shown = "  ".join(f"{k}={row[k]}" for k in ("average", *metrics.REPORT_FIELDS))
        print(shown + (f"  degenerate={row['degenerate']}" if row["degenerate"] else ""), file=out)
    return EXIT_OK


def cmd_gradcheck(args, out=sys.stdout) -> int:
    ok = True
    if args.scope == "op":
        for r in gradcheck.run_op_suite():
            ok &= r.passed
            print(f"{r.name:<20} worst_rel_err {r.worst:.3e}  {'PASS' if r.passed else 'FAIL'}", file=out)
    else:
        seed = 0 if args.seed is None else args.seed
        g = gradcheck.check_graph(gradcheck.tiny_spec(args.variant, args.d, seed), seed=seed)
        ok = g.passed
        print(f"graph {args.variant} d={args.d}  worst_rel_err {g.worst:.3e}  checked {g.checked}  "
              f"kink_skipped {g.kink_skipped}  {'PASS' if ok else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_synth(args, out=sys.stdout) -> int:
    seed = 0 if args.seed is None else args.seed
    pairs = data.generate_synthetic(args.count, args.size, args.scale, seed)
    root = data.write_pairs(args.out or Path("synthetic"), pairs)
    print(f"wrote {len(pairs)} {args.scale} pairs to {root}", file=out)
    return EXIT_OK


COMMANDS = {"audit": cmd_audit, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, sys.stdout)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SpecMismatchError, ConfigError, ValidationError, ShapeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DecodeError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
