"""``mctformer`` command-line interface.

Subcommands: generate, train, infer, eval, ablate.  Every command writes
its outputs into an existing ``--out-dir`` and, before doing any work, a
``manifest-<command>.json`` file there (see :func:`write_manifest`).
A manifest can be fed back with ``--config`` to repeat the run.

Model flags mirror :class:`~mctformer.config.ModelConfig` field names
(``--num_classes`` and ``--num-classes`` are both accepted), and so do the
training flags for :class:`~mctformer.config.RunParams`.  Values are
resolved as: built-in default < ``--config`` file < command line.

Exit status: 0 on success, 2 for usage errors, 1 for runtime failures
(I/O, bad archives, mismatched inputs), 3 when training diverges.
"""

import argparse
import csv
import json
import os
import sys
import tempfile
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import HEAD_MODES, VARIANTS, ConfigError, ModelConfig, RunParams
from .data import PlacementError, generate_dataset, load_dataset, save_dataset
from .evaluation import (
    DEFAULT_THRESHOLDS,
    collect_records,
    evaluate_model,
    infer_maps,
    k_sweep,
    maps_from_records,
    summary_text,
    threshold_sweep,
    write_evaluation_csv,
)
from .maps import STAGES, export_maps, read_maps_csv
from .model import load_checkpoint
from .training import DivergenceError, train

MANIFEST_FORMAT = "mctformer-manifest/1"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CommandError(Exception):
    pass


# ----------------------------------------------------------------------
# argument handling

_MODEL_HELP = {
    "num_classes": "number of classes C",
    "grid_side": "patch grid side N (M = N*N patches)",
    "embed_dim": "token width D",
    "num_layers": "transformer layers L",
    "num_heads": "attention heads H",
    "fuse_layers": "fuse class attention from the last K layers",
    "patch_size": "pixels per patch side",
    "mlp_ratio": "MLP hidden width / D",
    "variant": "V1 (class tokens only) or V2 (adds the PatchCAM head)",
    "head_mode": "class-score head",
}
_RUN_HELP = {
    "epochs": "training epochs",
    "batch_size": "mini-batch size",
    "lr": "peak learning rate",
    "min_lr": "final learning rate of the cosine schedule",
    "weight_decay": "decoupled weight decay",
    "beta1": "AdamW beta1",
    "beta2": "AdamW beta2",
    "eps": "AdamW epsilon",
}


def _add_field_flags(parser, cls, helps):
    for f in fields(cls):
        if f.name not in helps:
            continue
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        kw = {"dest": f.name, "default": argparse.SUPPRESS, "help": f"{helps[f.name]} (default {f.default})"}
        if f.name == "variant":
            kw["choices"] = VARIANTS
        elif f.name == "head_mode":
            kw["choices"] = HEAD_MODES
        else:
            kw["type"] = type(f.default)
        parser.add_argument(*names, **kw)


def _common(parser, seed=True):
    parser.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS, help="existing output directory (required)")
    parser.add_argument("--config", default=None, help="JSON file of flag values, or a manifest written by a previous run")
    if seed:
        parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="the single source of randomness (default 0)")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")


def build_parser():
    parser = argparse.ArgumentParser(prog="mctformer", description="Class-token vision transformer localization experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset archive")
    _common(p)
    p.add_argument("--count", type=int, default=argparse.SUPPRESS, help="number of samples (>= 1)")
    p.add_argument("--name", default=argparse.SUPPRESS, help="archive file name (default dataset.npz)")
    _add_field_flags(p, ModelConfig, {k: _MODEL_HELP[k] for k in ("num_classes", "grid_side", "patch_size")})

    p = sub.add_parser("train", help="train a model on a dataset archive")
    _common(p)
    p.add_argument("--data", default=argparse.SUPPRESS, help="training dataset archive")
    _add_field_flags(p, ModelConfig, _MODEL_HELP)
    _add_field_flags(p, RunParams, _RUN_HELP)

    p = sub.add_parser("infer", help="export localization maps for every image of a dataset")
    _common(p, seed=False)
    p.add_argument("--checkpoint", default=argparse.SUPPRESS, help="checkpoint archive from 'train'")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset archive")
    p.add_argument("--stage", choices=STAGES, default=argparse.SUPPRESS, help="pipeline stage (default full)")
    p.add_argument("--fuse_layers", "--fuse-layers", dest="fuse_layers", type=int, default=argparse.SUPPRESS,
                   help="override K stored in the checkpoint")
    p.add_argument("--no-labels", dest="no_labels", action="store_true", default=argparse.SUPPRESS,
                   help="do not zero the maps of classes absent from the image labels")
    p.add_argument("--scale", type=int, default=argparse.SUPPRESS, help="PNG upscaling factor (default 1)")

    p = sub.add_parser("eval", help="score exported maps against ground truth")
    _common(p, seed=False)
    p.add_argument("--maps-dir", dest="maps_dir", default=argparse.SUPPRESS, help="directory written by 'infer'")
    p.add_argument("--data", default=argparse.SUPPRESS, help="dataset archive with ground-truth masks")

    p = sub.add_parser("ablate", help="head-mode and K ablation tables")
    _common(p)
    p.add_argument("--data", default=argparse.SUPPRESS, help="training dataset archive")
    p.add_argument("--test-data", dest="test_data", default=argparse.SUPPRESS, help="held-out dataset archive")
    _add_field_flags(p, ModelConfig, _MODEL_HELP)
    _add_field_flags(p, RunParams, _RUN_HELP)
    return parser


_DEFAULTS = {
    "generate": {"seed": 0, "count": None, "name": "dataset.npz"},
    "train": {"seed": 0},
    "infer": {"stage": "full", "no_labels": False, "scale": 1},
    "eval": {},
    "ablate": {"seed": 0},
}


def _load_config_file(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CommandError(f"cannot read config file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and data.get("format") == MANIFEST_FORMAT:
        data = data["args"]
    if not isinstance(data, dict):
        raise CommandError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_args(parser, argv):
    """Parse ``argv`` and merge it over the config file and defaults (a dict)."""
    ns = parser.parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if k != "config"}
    from_file = _load_config_file(ns.config) if ns.config else {}
    from_file.pop("command", None)
    merged = {"quiet": False, **_DEFAULTS[ns.command], **from_file, **given}
    merged["command"] = ns.command
    return merged


def _model_config(args):
    names = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in args.items() if k in names})


def _run_params(args):
    names = {f.name for f in fields(RunParams)}
    return RunParams(**{k: v for k, v in args.items() if k in names})


def _require(args, *keys):
    missing = [k for k in keys if args.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(args):
    _require(args, "out_dir")
    out = Path(args["out_dir"])
    if not out.is_dir():
        raise CommandError(f"output directory {out} does not exist (create it first)")
    if not os.access(out, os.W_OK):
        raise CommandError(f"output directory {out} is not writable")
    return out


def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} {p} not found")
    return p


# ----------------------------------------------------------------------
# manifests


def write_manifest(out_dir, args, config=None, checkpoint=None, dataset=None):
    """Atomically write ``manifest-<command>.json`` into ``out_dir``.

    Fields: format, command, args (every resolved option, enough to rerun
    with ``--config``), config (ModelConfig snapshot or null), seed,
    checkpoint and dataset paths, output directory and a UTC timestamp.
    """
    record = {
        "format": MANIFEST_FORMAT,
        "command": args["command"],
        "args": {k: v for k, v in sorted(args.items()) if k != "command"},
        "config": None if config is None else config.to_dict(),
        "seed": args.get("seed"),
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "dataset": None if dataset is None else str(dataset),
        "out_dir": str(out_dir),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "version": __version__,
    }
    target = Path(out_dir) / f"manifest-{args['command']}.json"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def _say(args, msg):
    if not args.get("quiet"):
        print(msg, file=sys.stderr, flush=True)


def _load_data(path):
    try:
        return load_dataset(_existing(path, "dataset"))
    except (ValueError, KeyError, OSError) as exc:
        if isinstance(exc, CommandError):
            raise
        raise CommandError(f"cannot read dataset {path}: {exc}") from exc


def _check_data_matches(meta, config, path):
    for key in ("num_classes", "grid_side", "patch_size"):
        if meta.get(key) != getattr(config, key):
            raise CommandError(f"dataset {path} has {key}={meta.get(key)} but the model expects {getattr(config, key)}")


# ----------------------------------------------------------------------
# commands


def cmd_generate(args):
    out = _out_dir(args)
    _require(args, "count")
    if args["count"] < 1:
        raise UsageError(f"--count must be >= 1, got {args['count']}")
    config = _model_config(args)
    target = out / args["name"]
    write_manifest(out, args, config, dataset=target)
    samples = generate_dataset(args["seed"], args["count"], config)
    try:
        save_dataset(target, samples, args["seed"], config)
    except OSError as exc:
        raise CommandError(f"cannot write {target}: {exc.strerror}") from exc
    _say(args, f"wrote {len(samples)} samples to {target}")
    return EXIT_OK


def _progress(args, steps_per_epoch):
    if args.get("quiet"):
        return None

    def report(epoch, trace):
        recent = trace.total[-steps_per_epoch:]
        print(f"epoch {epoch + 1}: mean loss {np.mean(recent):.5f}", file=sys.stderr, flush=True)

    return report


def cmd_train(args):
    out = _out_dir(args)
    _require(args, "data")
    config = _model_config(args)
    run = _run_params(args)
    samples, meta = _load_data(args["data"])
    _check_data_matches(meta, config, args["data"])
    ckpt = out / "checkpoint.npz"
    write_manifest(out, args, config, checkpoint=ckpt, dataset=args["data"])
    steps = -(-len(samples) // run.batch_size)
    _, trace = train(samples, config, run, checkpoint_path=ckpt, progress=_progress(args, steps))
    trace.write_csv(out / "loss.csv")
    _say(args, f"checkpoint {ckpt}, loss trace {out / 'loss.csv'}")
    return EXIT_OK


def _load_model(path):
    try:
        params, config, extra = load_checkpoint(_existing(path, "checkpoint"))
    except CommandError:
        raise
    except (ValueError, KeyError, OSError, ConfigError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from exc
    return params, config


def cmd_infer(args):
    out = _out_dir(args)
    _require(args, "checkpoint", "data")
    params, config = _load_model(args["checkpoint"])
    samples, meta = _load_data(args["data"])
    _check_data_matches(meta, config, args["data"])
    k = args.get("fuse_layers")
    if k is not None and not 1 <= k <= config.num_layers:
        raise UsageError(f"--fuse_layers must be in [1, {config.num_layers}], got {k}")
    stage = args["stage"]
    if stage == "attn+cam" and config.variant != "V2":
        raise CommandError("stage 'attn+cam' needs a V2 checkpoint")
    write_manifest(out, args, config, checkpoint=args["checkpoint"], dataset=args["data"])
    maps = infer_maps(params, config, samples, stage=stage, fuse_layers=k, use_labels=not args["no_labels"])
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    for i, m in enumerate(maps):
        export_maps(m, maps_dir, f"sample{i:05d}", scale=args["scale"])
    _say(args, f"wrote maps of {len(maps)} samples to {maps_dir}")
    return EXIT_OK


def read_exported_maps(maps_dir):
    """Maps written by ``infer``, in sample order."""
    root = Path(maps_dir)
    if (root / "maps").is_dir():
        root = root / "maps"
    files = sorted(root.glob("sample*.csv"))
    if not files:
        raise CommandError(f"no exported maps (sample*.csv) in {maps_dir}")
    return [read_maps_csv(f) for f in files]


def cmd_eval(args):
    out = _out_dir(args)
    _require(args, "maps_dir", "data")
    samples, _ = _load_data(args["data"])
    maps = read_exported_maps(args["maps_dir"])
    if len(maps) != len(samples):
        raise CommandError(f"{len(maps)} exported maps but {len(samples)} samples in {args['data']}")
    c = maps[0].shape[0]
    if any(m.shape != maps[0].shape for m in maps) or maps[0].shape[1:] != samples[0].gt_mask.shape:
        raise CommandError("exported maps do not match the ground-truth mask shape")
    write_manifest(out, args, dataset=args["data"])
    ev = threshold_sweep(maps, [s.gt_mask for s in samples], DEFAULT_THRESHOLDS, c)
    write_evaluation_csv(out / "eval.csv", ev)
    text = summary_text(ev)
    (out / "summary.txt").write_text(text + "\n")
    if not args.get("quiet"):
        print(text)
    return EXIT_OK


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def cmd_ablate(args):
    out = _out_dir(args)
    _require(args, "data", "test_data")
    base = _model_config(args)
    run = _run_params(args)
    train_set, meta = _load_data(args["data"])
    test_set, test_meta = _load_data(args["test_data"])
    _check_data_matches(meta, base, args["data"])
    _check_data_matches(test_meta, base, args["test_data"])
    write_manifest(out, args, base, dataset=args["data"])

    head_rows, stage_rows, k_rows = [], [], []
    for mode in HEAD_MODES:
        config = base.replace(head_mode=mode)
        _say(args, f"training head_mode={mode}")
        params, _ = train(train_set, config, run)
        ev = evaluate_model(params, config, test_set, stage="full")
        head_rows.append((mode, ev.miou, ev.fp, ev.fn, ev.best_threshold))
        if mode != base.head_mode:
            continue
        records = collect_records(params, config, test_set)
        truths = [s.gt_mask for s in test_set]
        stages = STAGES if config.variant == "V2" else ("attn", "attn+affinity")
        for stage in stages:
            sev = threshold_sweep(maps_from_records(records, config, test_set, stage=stage), truths,
                                  DEFAULT_THRESHOLDS, config.num_classes)
            stage_rows.append((stage, sev.miou, sev.fp, sev.fn, sev.best_threshold))
        k_rows = k_sweep(params, config, test_set)
    _write_rows(out / "ablation_head.csv", ["head_mode", "miou", "fp", "fn", "best_threshold"], head_rows)
    _write_rows(out / "ablation_k.csv", ["k", "fp", "fn", "miou"], k_rows)
    _write_rows(out / "ablation_stage.csv", ["stage", "miou", "fp", "fn", "best_threshold"], stage_rows)
    _say(args, f"wrote ablation tables to {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = resolve_args(parser, argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except CommandError as exc:
        print(f"mctformer: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        return COMMANDS[args["command"]](args)
    except UsageError as exc:
        print(f"mctformer {args['command']}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mctformer {args['command']}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CommandError, ConfigError, PlacementError) as exc:
        print(f"mctformer {args['command']}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"mctformer {args['command']}: I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
