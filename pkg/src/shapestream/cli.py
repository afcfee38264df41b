"""Command-line front end: dataset generation, training, evaluation, bench.

Every command is reproducible: outputs are fully determined by the command
line, the config and the seed, and each output directory carries a
machine-readable provenance record. Exit codes: 0 success, 2 usage error,
3 data/config mismatch, 4 numeric failure (aborted training).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench_attention, format_table, write_results
from .checkpoint import CheckpointError, load_model
from .metrics import evaluate_split
from .model import ModelConfig, TRAIN_VIEW_CHOICES, VARIANTS
from .scenes import DEFAULT_VIEWS, PROTOCOLS, build_manifest, read_manifest, \
    read_sequence_grids, write_dataset
from .train import TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_NUMERIC = 4

MODEL_CONFIG_KEYS = ("variant", "resolution", "latent_dim", "qk_dim", "feature_count",
                     "kernel", "performer_layers", "conv_channels", "mlp_ratio",
                     "train_views", "max_views", "share_towers", "seed")
TRAIN_ONLY_KEYS = ("learning_rate", "steps", "val_every")


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _default_seed() -> int:
    return int(os.environ.get("MVP_SEED", "0"))


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, argv: list, seed: int, config: dict) -> None:
    canonical = json.dumps(config, sort_keys=True)
    record = {
        "command": argv,
        "seed": seed,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _parse_set_overrides(pairs: list) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_split(data_dir, manifest, split: str):
    out = []
    for spec in manifest.split_sequences(split):
        frames, targets = read_sequence_grids(data_dir, manifest, spec)
        out.append((spec.seq_id, frames, targets))
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, argv: list) -> int:
    out = _prepare_out(args.out, args.force)
    manifest = build_manifest(args.protocol, args.objects, args.res, args.views,
                              args.seed)
    write_dataset(manifest, out)
    _write_provenance(out, argv, args.seed, {
        "protocol": args.protocol, "objects": args.objects, "res": args.res,
        "views": args.views,
    })
    splits = {s: sum(1 for q in manifest.sequences if q.split == s)
              for s in ("train", "val", "test")}
    print(f"protocol {manifest.protocol}: {len(manifest.objects)} objects, "
          f"{len(manifest.sequences)} sequences "
          f"(train/val/test = {splits['train']}/{splits['val']}/{splits['test']}), "
          f"{len(manifest.sequences) * manifest.views} frames at r={manifest.resolution}")
    print(f"wrote dataset to {out}")
    return EXIT_OK


def _assemble_model_config(args, manifest) -> tuple[ModelConfig, dict]:
    settings: dict = {"resolution": manifest.resolution, "seed": args.seed}
    if args.config:
        settings.update(json.loads(Path(args.config).read_text()))
    settings.update(_parse_set_overrides(args.set))
    flag_map = {
        "variant": args.variant, "train_views": args.train_views,
        "kernel": args.kernel, "latent_dim": args.latent_dim,
        "qk_dim": args.qk_dim, "feature_count": args.features,
        "performer_layers": args.layers, "resolution": args.res,
        "attention_heads": args.heads,
    }
    if getattr(args, "channels", None):
        flag_map["conv_channels"] = [int(c) for c in args.channels.split(",")]
    for key, value in flag_map.items():
        if value is not None:
            settings[key] = value
    train_settings = {k: settings.pop(k) for k in list(settings)
                      if k in TRAIN_ONLY_KEYS}
    unknown = set(settings) - set(MODEL_CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    config = ModelConfig(**settings).validate()
    if config.resolution != manifest.resolution:
        raise MismatchError(
            f"config resolution {config.resolution} does not match dataset "
            f"resolution {manifest.resolution}")
    return config, train_settings


def cmd_train(args, argv: list) -> int:
    manifest = read_manifest(args.data)
    config, train_settings = _assemble_model_config(args, manifest)
    out = _prepare_out(args.out, args.force)
    steps = int(train_settings.get("steps", args.steps))
    lr = float(train_settings.get("learning_rate", args.lr))
    val_every = int(train_settings.get("val_every", args.val_every))
    if config.variant == "single_view":
        print("note: single_view keeps no sequence state; views are completed "
              "independently")
    train_data = [(f, t) for _, f, t in _load_split(args.data, manifest, "train")]
    val_data = [(f, t) for _, f, t in _load_split(args.data, manifest, "val")]
    if not train_data:
        raise MismatchError(f"dataset {args.data} has no train split")
    result = train(config, train_data, val_data, steps,
                   checkpoint_path=out / "checkpoint.mvpc",
                   metrics_path=out / "metrics.csv",
                   learning_rate=lr, val_every=val_every)
    _write_provenance(out, argv, args.seed, config.to_dict())
    print(f"trained {config.variant} ({result.model.parameter_count} parameters) "
          f"for {result.steps_run} steps")
    if np.isfinite(result.best_val_jaccard):
        print(f"best validation jaccard {result.best_val_jaccard:.4f}")
    print(f"final train jaccard {result.final_train_jaccard:.4f}")
    print(f"checkpoint: {out / 'checkpoint.mvpc'}")
    return EXIT_OK


def cmd_eval(args, argv: list) -> int:
    manifest = read_manifest(args.data)
    if args.checkpoint == "oracle":
        model = None
        config_dict = {"oracle": True}
    else:
        try:
            model = load_model(args.checkpoint)
        except CheckpointError as err:
            raise MismatchError(str(err)) from err
        if model.config.resolution != manifest.resolution:
            raise MismatchError(
                f"checkpoint resolution {model.config.resolution} does not match "
                f"dataset resolution {manifest.resolution}")
        config_dict = model.config.to_dict()
    sequences = _load_split(args.data, manifest, args.split)
    if not sequences:
        raise MismatchError(f"dataset {args.data} has no {args.split!r} split")
    out = _prepare_out(args.out, args.force)
    export = tuple(args.export.split(",")) if args.export else ()
    report = evaluate_split(model, sequences, manifest.protocol, args.split,
                            extent=manifest.extent, n_points=args.points,
                            threshold_fraction=args.threshold,
                            sample_seed=args.seed,
                            export_dir=out if export else None, export=export)
    report.to_csv(out / "frames.csv")
    report.write_summary(out / "summary.json")
    _write_provenance(out, argv, args.seed, config_dict)
    print(f"{manifest.protocol} {args.split}: mean jaccard {report.mean_jaccard:.4f}, "
          f"mean f-score {report.mean_fscore:.4f} over {len(report.rows)} frames")
    print(f"report: {out / 'summary.json'}")
    return EXIT_OK


def cmd_bench(args, argv: list) -> int:
    lengths = tuple(int(x) for x in args.lengths.split(","))
    results = bench_attention(lengths=lengths, d=args.dim, d_qk=args.dim,
                              heads=args.heads, trials=args.trials,
                              kernel=args.kernel or "relu", seed=args.seed)
    print(format_table(results))
    if args.out:
        out = _prepare_out(args.out, args.force)
        write_results(results, out / "bench.json")
        _write_provenance(out, argv, args.seed,
                          {"lengths": list(lengths), "dim": args.dim,
                           "heads": args.heads, "trials": args.trials})
        print(f"wrote {out / 'bench.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapestream",
        description="streaming multi-view shape completion at toy voxel scale")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a protocol dataset")
    gen.add_argument("--protocol", required=True, choices=PROTOCOLS)
    gen.add_argument("--objects", type=int, default=10)
    gen.add_argument("--res", type=int, default=16)
    gen.add_argument("--views", type=int, default=DEFAULT_VIEWS)
    gen.add_argument("--seed", type=int, default=_default_seed())
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a model variant on a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--variant", choices=VARIANTS, default=None)
    tr.add_argument("--train-views", type=int, choices=TRAIN_VIEW_CHOICES,
                    dest="train_views", default=None)
    tr.add_argument("--kernel", choices=("softmax", "relu"), default=None)
    tr.add_argument("--latent-dim", type=int, dest="latent_dim", default=None)
    tr.add_argument("--qk-dim", type=int, dest="qk_dim", default=None)
    tr.add_argument("--features", type=int, default=None)
    tr.add_argument("--layers", type=int, default=None)
    tr.add_argument("--heads", type=int, default=None)
    tr.add_argument("--channels", default=None, help="comma-separated conv channels")
    tr.add_argument("--res", type=int, default=None)
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--val-every", type=int, dest="val_every", default=100)
    tr.add_argument("--config", default=None, help="JSON config file")
    tr.add_argument("--set", action="append", default=[],
                    help="override a config key, e.g. --set latent_dim=64")
    tr.add_argument("--seed", type=int, default=_default_seed())
    tr.add_argument("--force", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True,
                    help="checkpoint path, or 'oracle' for the identity test hook")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--out", required=True)
    ev.add_argument("--export", default="",
                    help="comma-separated exports: grids,meshes,slices")
    ev.add_argument("--points", type=int, default=2048)
    ev.add_argument("--threshold", type=float, default=0.01,
                    help="f-score threshold as a fraction of the grid diagonal")
    ev.add_argument("--seed", type=int, default=_default_seed())
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="attention-block throughput microbenchmark")
    be.add_argument("--lengths", default="16,64,256")
    be.add_argument("--dim", type=int, default=256)
    be.add_argument("--heads", type=int, default=8)
    be.add_argument("--trials", type=int, default=200)
    be.add_argument("--kernel", choices=("softmax", "relu"), default="relu")
    be.add_argument("--seed", type=int, default=_default_seed())
    be.add_argument("--out", default=None)
    be.add_argument("--force", action="store_true")
    be.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args, argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (MismatchError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
