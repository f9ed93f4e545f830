"""Command-line entry point: ``gasmil <subcommand> [options]``.

Exit status is 0 on success, 1 on a domain error (bad data or configuration)
and 2 on a usage error.  Results go to stdout, diagnostics to stderr.

Settings resolve as built-in defaults, then ``--config`` JSON, then flags.
The environment variable ``GASMIL_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .bagio import (
    GroupLayout,
    Manifest,
    SplitSpec,
    SynthConfig,
    decode_bag,
    stratified_split,
    synth_generate,
)
from .baselines import BaselineConfig, build_model
from .checkpoint import describe_checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, GasMilError
from .model import GasMilConfig
from .numerics import make_rng
from .preprocess import preprocess_image, read_ppm
from .training import SWEEP_HEADER, TrainConfig, ensemble_sweep, evaluate_split, fit, write_report

logger = logging.getLogger("gasmil")

MODEL_KEYS = (
    {f.name for f in fields(GasMilConfig)} | {f.name for f in fields(BaselineConfig)}
) - {"layout", "num_classes", "kind", "loss_kind"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RUN_KEYS = MODEL_KEYS | TRAIN_KEYS | {"arch", "fractions", "manifest", "out", "checkpoint", "split"}

# flag destination -> config key
FLAG_KEYS = {
    "arch": "arch",
    "gfeb": "gfeb_kind",
    "loss": "loss_kind",
    "seed": "seed",
    "s": "s",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "noise_std": "noise_std",
    "patience": "patience",
    "bag_size": "bag_size",
    "monitor": "monitor_metric",
    "manifest": "manifest",
    "out": "out",
    "checkpoint": "checkpoint",
}


def load_run_config(path):
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    unknown = sorted(set(obj) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return obj


def resolve(args):
    """Merge defaults < config file < command-line flags into one dict."""
    cfg = {"arch": "gasmil", "gfeb_kind": "mlp"}
    cfg.update({f.name: f.default for f in fields(TrainConfig)})
    cfg.update(load_run_config(getattr(args, "config", None)))
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[key] = value
    return cfg


def train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})


def make_model(cfg, layout, num_classes):
    overrides = {k: cfg[k] for k in MODEL_KEYS if k in cfg and k != "gfeb_kind"}
    return build_model(cfg["arch"], layout, num_classes, cfg["loss_kind"], cfg["gfeb_kind"], **overrides)


def _int_list(text, what):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from None


def _fractions(text):
    if isinstance(text, (list, tuple)):
        parts = [float(x) for x in text]
    else:
        try:
            parts = [float(x) for x in text.split(",")]
        except ValueError:
            raise ConfigError(f"fractions must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"expected train,val,test fractions, got {parts}")
    return parts


def _require(cfg, key, flag):
    if not cfg.get(key):
        raise ConfigError(f"missing {flag} (or '{key}' in --config)")
    return cfg[key]


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


# subcommands


def cmd_synth(args):
    dims = _int_list(args.groups, "--groups")
    layout = GroupLayout.from_dims(dims)
    plan = None
    if args.plan:
        plan = [tuple(_int_list(part, "--plan")) for part in args.plan.split(";")]
    lo, hi = (float(x) for x in args.signal_fraction.split(","))
    synth = SynthConfig(shift=args.shift, signal_fraction=(lo, hi), ordinal=args.ordinal)
    split = None
    if args.fractions.lower() != "none":
        split = SplitSpec(*_fractions(args.fractions), seed=args.seed)
    manifest = synth_generate(
        args.out, layout, args.bags, args.instances, args.classes, plan, make_rng(args.seed), synth, split
    )
    _emit({"manifest": str(Path(args.out) / "manifest.json"), "bags": len(manifest.entries),
           "splits": {t: len(manifest.split(t)) for t in ("train", "val", "test", "unassigned")}})
    return 0


def cmd_split(args):
    cfg = resolve(args)
    path = _require(cfg, "manifest", "--manifest")
    manifest = Manifest.load(path)
    fractions = _fractions(args.fractions if args.fractions else cfg.get("fractions", "0.7,0.15,0.15"))
    result = stratified_split(manifest, SplitSpec(*fractions, seed=cfg["seed"]))
    out = cfg.get("out") or path
    result.root = manifest.root
    Path(out).write_text(json.dumps(result.to_json(), indent=1) + "\n")
    _emit({"manifest": str(out), "splits": {t: len(result.split(t)) for t in ("train", "val", "test")}})
    return 0


def cmd_preprocess(args):
    image = read_ppm(args.image)
    mask, grid = preprocess_image(
        image,
        args.out,
        scale_factor=args.scale_factor,
        tile_size=args.tile_size,
        coverage_threshold=args.coverage,
        dilation_radius=args.dilation,
        method=args.threshold,
        fixed_threshold=args.fixed_threshold,
    )
    _emit({"tiles": len(grid.coords), "index": str(Path(args.out) / "tiles.json"),
           "mask_pixels": int(mask.bits.sum())})
    return 0


def cmd_train(args):
    cfg = resolve(args)
    manifest = Manifest.load(_require(cfg, "manifest", "--manifest"))
    out = Path(_require(cfg, "out", "--out"))
    tc = train_config(cfg)
    model = make_model(cfg, manifest.layout, manifest.num_classes)
    params, log = fit(manifest, model, tc)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.gmck", model, params)
    log.to_csv(out / "trainlog.csv")
    best = log.records[log.best_epoch - 1] if log.best_epoch else log.records[-1]
    _emit({
        "checkpoint": str(out / "model.gmck"),
        "trainlog": str(out / "trainlog.csv"),
        "epochs_run": len(log.records),
        "best_epoch": log.best_epoch,
        "stop_reason": log.stop_reason,
        "best_val_balanced_accuracy": best.val_balanced_accuracy,
    })
    return 0


def cmd_eval(args):
    cfg = resolve(args)
    manifest = Manifest.load(_require(cfg, "manifest", "--manifest"))
    ckpt = cfg.get("checkpoint")
    if not ckpt and cfg.get("out"):
        ckpt = str(Path(cfg["out"]) / "model.gmck")
    if not ckpt:
        raise ConfigError("missing --checkpoint")
    model, params = load_checkpoint(ckpt)
    split = args.split or cfg.get("split", "test")
    report = evaluate_split(manifest, split, model, params, cfg["bag_size"], cfg["seed"], cfg["eval_batch"])
    if args.report:
        write_report(args.report, report)
    sys.stdout.write(report.dumps() + "\n")
    return 0


def cmd_sweep(args):
    cfg = resolve(args)
    manifest = Manifest.load(_require(cfg, "manifest", "--manifest"))
    out = _require(cfg, "out", "--out")
    tc = train_config(cfg)
    sizes = None
    if args.sizes:
        sizes = _int_list(args.sizes, "--sizes")
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in ensemble_sweep(manifest, lambda lay: make_model(cfg, lay, manifest.num_classes), tc, sizes):
            writer.writerow(row)
            fh.flush()
            logger.info("k=%d %s balanced_accuracy=%.4f", row["k"], row["combo"], row["balanced_accuracy"])
    _emit({"sweep": str(out)})
    return 0


def cmd_inspect(args):
    path = Path(args.path)
    data = path.read_bytes()
    if data[:4] == b"GMBG":
        bag = decode_bag(data)
        _emit({"kind": "bag", "bag_id": bag.bag_id, "n": bag.features.shape[0],
               "m": bag.features.shape[1], "label": bag.label})
    elif data[:4] == b"GMCK":
        _emit(describe_checkpoint(data))
    else:
        manifest = Manifest.load(path)
        _emit({"kind": "manifest", "layout": manifest.layout.to_json(), "num_classes": manifest.num_classes,
               "entries": len(manifest.entries),
               "splits": {t: len(manifest.split(t)) for t in ("train", "val", "test", "unassigned")}})
    return 0


def _training_flags(p):
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--arch", choices=["gasmil", "abmil", "chowder"])
    p.add_argument("--gfeb", choices=["mlp", "attention"])
    p.add_argument("--loss", choices=["ce", "bce-ordinal"])
    p.add_argument("--seed", type=int)
    p.add_argument("--s", type=int, help="Max-Min selection count")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--bag-size", type=int, help="instances per bag after sampling/padding")
    p.add_argument("--monitor", choices=["balanced_accuracy", "qwk", "weighted_f1", "loss"])


def build_parser():
    parser = argparse.ArgumentParser(prog="gasmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", required=True, help="comma-separated group widths, e.g. 16,24")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--bags", type=int, required=True)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plan", help="informative classes per group, e.g. '0,1;2'")
    p.add_argument("--shift", type=float, default=2.0)
    p.add_argument("--signal-fraction", default="0.1,0.3")
    p.add_argument("--ordinal", action="store_true")
    p.add_argument("--fractions", default="0.7,0.15,0.15", help="train,val,test or 'none'")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="assign stratified train/val/test tags")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output manifest (default: overwrite)")
    p.add_argument("--config")
    p.add_argument("--fractions")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("preprocess", help="tissue mask and tiles from a PPM image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-factor", type=int, default=16)
    p.add_argument("--tile-size", type=int, default=224)
    p.add_argument("--coverage", type=float, default=0.5)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--threshold", choices=["otsu", "fixed"], default="otsu")
    p.add_argument("--fixed-threshold", type=float, default=0.6)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _training_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--report", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ensemble-size sweep over group subsets (CSV)")
    _training_flags(p)
    p.add_argument("--sizes", help="comma-separated subset sizes (default: all)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="print bag, checkpoint or manifest headers")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _limit_threads():
    value = os.environ.get("GASMIL_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (GasMilError, OSError, ValueError) as exc:
        print(f"gasmil {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
