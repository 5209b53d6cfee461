"""Command line interface.

Every subcommand is a thin shell over the library: parse flags, call one
library entry point, print a JSON summary on stdout. Exit codes: 0 success,
2 validation error (bad flags or config values), 3 I/O or file-format error.
The environment variable OTVP_SEED supplies the default seed wherever a
--seed flag is omitted.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adapt as adapt_mod
from . import sweep as sweep_mod
from . import vit
from .metrics import MetricsError, _mean_std, aggregate, read_records
from .serialize import FormatError
from .synth import Corruption, DomainSpec, generate, load_dataset, save_dataset, split


def _default_seed() -> int:
    raw = os.environ.get("OTVP_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"OTVP_SEED must be an integer, got {raw!r}") from None


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _domain_from_entry(entry: dict, fallback_seed: int) -> DomainSpec:
    if "name" not in entry:
        raise ValueError("domain entry lacks a name")
    corruption = None
    if entry.get("corruption"):
        c = entry["corruption"]
        corruption = Corruption(c["kind"], int(c["severity"]))
    return DomainSpec(
        name=entry["name"],
        palette=int(entry.get("palette", 0)),
        background=int(entry.get("background", 0)),
        rotation_range=tuple(entry.get("rotation_range", (-15, 15))),
        corruption=corruption,
        seed=int(entry.get("seed", fallback_seed)))


def cmd_gen_data(args) -> int:
    seed = _seed_of(args)
    spec_doc = json.loads(Path(args.domains).read_text())
    entries = spec_doc["domains"] if isinstance(spec_doc, dict) else spec_doc
    if not isinstance(entries, list) or not entries:
        raise ValueError("domain spec must list at least one domain")
    written = []
    for i, entry in enumerate(entries):
        spec = _domain_from_entry(entry, fallback_seed=seed + i)
        ds = generate(spec, n=args.n)
        save_dataset(Path(args.out) / spec.name, {"all": ds})
        written.append({"name": spec.name, "n": int(ds.images.shape[0]),
                        "seed": spec.seed})
    _emit({"out": str(args.out), "domains": written})
    return 0


def cmd_train_source(args) -> int:
    seed = _seed_of(args)
    splits = load_dataset(Path(args.data) / args.domain)
    ds = next(iter(splits.values()))
    train, val = split(ds, train_fraction=0.8, seed=seed)
    cfg = vit.ViTConfig(image_size=ds.images.shape[2],
                        channels=ds.images.shape[1],
                        num_classes=int(ds.labels.max()) + 1,
                        seed=seed)
    params = vit.ViTParams.init(cfg)
    params, history = vit.train_source(
        params, (train.images, train.labels), (val.images, val.labels),
        epochs=args.epochs, seed=seed)
    meta = {"val_accuracy": history["best_val_acc"], "epochs": args.epochs,
            "seed": seed, "domain": args.domain}
    vit.save_checkpoint(args.out, params, meta=meta)
    _emit({"ckpt": str(args.out), **meta})
    return 0


def cmd_dump_reps(args) -> int:
    params = vit.load_checkpoint(args.ckpt)
    images, labels = sweep_mod.domain_arrays(args.data, args.domain)
    bank = adapt_mod.precompute_source_reps(params, images, labels,
                                            source_id=args.domain)
    adapt_mod.save_bank(args.out, bank)
    _emit({"bank": str(args.out), "rows": bank.n, "dim": int(bank.z_s.shape[1]),
           "source": args.domain})
    return 0


def cmd_adapt(args) -> int:
    config = {
        "ckpt": args.ckpt, "bank": args.bank, "data": args.data,
        "target": args.target, "method": args.method,
        "lambda": getattr(args, "lambda"), "prompt_len": args.prompts,
        "steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
        "online": args.online, "warmup_fraction": args.warmup_frac,
        "warmup_steps": args.warmup_steps, "online_steps": args.online_steps,
        "seed": _seed_of(args),
    }
    summary = sweep_mod.run_adaptation(config, metrics_path=args.metrics)
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    params = vit.load_checkpoint(args.ckpt)
    prompts = vit.load_prompts(args.prompts_file) if args.prompts_file else None
    images, labels = sweep_mod.domain_arrays(args.data, args.domain)
    preds = vit.predict(params, images, prompts)
    _emit({"domain": args.domain, "n": int(images.shape[0]),
           "accuracy": float(np.mean(preds == labels)),
           "mean_entropy": sweep_mod.set_entropy(params, prompts, images)})
    return 0


def cmd_sweep(args) -> int:
    spec_doc = json.loads(Path(args.spec).read_text())
    spec = sweep_mod.sweep_from_dict(spec_doc)
    results = sweep_mod.run_sweep(spec, args.out, jobs=args.jobs, force=args.force)
    # cell failures are isolated and recorded in the results, not fatal
    _emit({"cells": results})
    return 0


def cmd_report(args) -> int:
    mdir = Path(args.metrics_dir)
    if not mdir.is_dir():
        raise FileNotFoundError(f"not a directory: {mdir}")
    records = []
    for path in sorted(mdir.glob("**/*.jsonl")):
        records.extend(read_records(path))
    finals = [r for r in records if r.extra.get("final")]
    report = {
        "num_records": len(records),
        "num_runs": len(finals),
        "aggregates": aggregate(finals, group_keys=("method", "domains")),
        "axes": {},
    }
    out = Path(args.out)
    csv_files = []
    for axis in sweep_mod.SWEEP_AXES:
        by_value: dict = {}
        for rec in finals:
            cfg = rec.extra.get("config")
            if not cfg or axis not in cfg:
                continue
            by_value.setdefault(cfg[axis], []).append(rec)
        if len(by_value) < 2:
            continue
        rows = []
        for value in sorted(by_value):
            accs = [r.accuracy for r in by_value[value] if r.accuracy is not None]
            if not accs:
                continue
            mean, std = _mean_std(accs)
            rows.append({"value": value, "accuracy_mean": mean,
                         "accuracy_std": std, "count": len(accs)})
        report["axes"][axis] = rows
        csv_path = out.with_name(f"{out.stem}_{axis}.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["value", "accuracy_mean",
                                                    "accuracy_std", "count"])
            writer.writeheader()
            writer.writerows(rows)
        csv_files.append(str(csv_path))
    report["csv_files"] = csv_files
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({"report": str(out), "num_runs": len(finals), "csv_files": csv_files})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otvp",
        description="Prompt-based test-time adaptation via optimal transport.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domains")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", required=True, help="JSON file listing domains")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model")
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=24)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("dump-reps", help="precompute source representations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_reps)

    p = sub.add_parser("adapt", help="adapt prompts to a target domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--method", default="otvp", choices=adapt_mod.METHODS)
    p.add_argument("--lambda", type=float, default=1e4)
    p.add_argument("--prompts", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--online", action="store_true")
    p.add_argument("--warmup-frac", type=float, default=0.01)
    p.add_argument("--warmup-steps", type=int, default=50)
    p.add_argument("--online-steps", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metrics", default=None, help="JSONL output path")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts-file", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--spec", required=True, help="JSON sweep spec")
    p.add_argument("--out", required=True, help="metrics directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate metrics into a report")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as e:
        print(f"error: invalid JSON: {e}", file=sys.stderr)
        return 3
    except (FormatError, MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
