"""Command-line entry point.

Verbs:

* ``gen-data``  -- generate a synthetic dataset directory.
* ``pretrain``  -- run one training job.
* ``ablate``    -- run a matrix of variant training jobs and merge a report.
* ``eval-prop`` -- label-propagation evaluation of a checkpoint on a dataset.
* ``report``    -- summary tables and plots from completed run directories.

Exit codes: 0 success, 2 bad configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from . import propagation as prop
from . import reporting
from . import trainer as tr
from . import videodata as vd
from .checkpoint import load_training_state
from .model import StochasticFramePredictor
from .videodata import ConfigurationError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--preset", choices=sorted(tr.PRESETS), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")


def _parse_overrides(items: list[str]) -> dict:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
        key, val = item.split("=", 1)
        overrides[key] = val
    return overrides


def _load_train_config(args) -> tr.TrainConfig:
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return tr.load_config(args.config, overrides=overrides, preset=args.preset)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framepred")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", choices=["drift", "branch", "static"],
                   default="branch")
    p.add_argument("--config", default=None,
                   help="JSON file of GeneratorSpec fields")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="run one training job")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("ablate", help="run an ablation matrix")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--axis", action="append", default=[],
                   metavar="KEY=V1,V2,...", help="ablation axis (repeatable)")

    p = sub.add_parser("eval-prop", help="label propagation evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topk", type=int, default=7)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--queue-len", type=int, default=8)
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--max-clips", type=int, default=None)

    p = sub.add_parser("report", help="summaries and plots from run dirs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True)
    return parser


def _write_run_manifest(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen_data(args) -> int:
    spec_dict = vd.GeneratorSpec(family=args.spec).to_dict()
    if args.config:
        with open(args.config) as f:
            spec_dict.update(json.load(f))
    for key, val in _parse_overrides(args.override).items():
        if key not in spec_dict:
            raise ConfigurationError(f"unknown GeneratorSpec key {key!r}")
        typ = type(spec_dict[key])
        spec_dict[key] = tr._coerce(typ, val)
    spec_dict["family"] = spec_dict.get("family", args.spec)
    spec = vd.GeneratorSpec.from_dict(spec_dict)
    spec.validate()
    _write_run_manifest(args.out, {"verb": "gen-data", "spec": spec.to_dict(),
                                   "seed": args.seed, "status": "running"})
    dataset = vd.generate_synthetic_dataset(spec, args.seed)
    vd.save_dataset(dataset, args.out)
    _write_run_manifest(args.out, {"verb": "gen-data", "spec": spec.to_dict(),
                                   "seed": args.seed, "status": "done"})
    return 0


def cmd_pretrain(args) -> int:
    config = _load_train_config(args)
    dataset = vd.load_dataset(args.data)
    tr.train(config, dataset, args.out)
    return 0


def cmd_ablate(args) -> int:
    config = _load_train_config(args)
    dataset = vd.load_dataset(args.data)
    axes = {}
    known = {f.name: f for f in dataclasses.fields(tr.TrainConfig)}
    for item in args.axis:
        if "=" not in item:
            raise ConfigurationError(f"axis {item!r} is not KEY=V1,V2,...")
        key, vals = item.split("=", 1)
        if key not in known:
            raise ConfigurationError(f"unknown ablation axis {key!r}")
        typ = type(getattr(config, key))
        axes[key] = [tr._coerce(typ, v) for v in vals.split(",")]
    _write_run_manifest(args.out, {"verb": "ablate", "axes": {
        k: [str(v) for v in vs] for k, vs in axes.items()},
        "config": config.to_dict(), "status": "running"})
    tr.run_ablation_matrix(config, axes, dataset, args.out)
    _write_run_manifest(args.out, {"verb": "ablate", "axes": {
        k: [str(v) for v in vs] for k, vs in axes.items()},
        "config": config.to_dict(), "status": "done"})
    return 0


def cmd_eval_prop(args) -> int:
    dataset = vd.load_dataset(args.data)
    state = load_training_state(args.checkpoint)
    config = tr.TrainConfig.from_dict(state["extra"]["config"])
    model = StochasticFramePredictor(config.model_config())
    model.load_state_dict(state["model_state"])
    model.eval()
    cfg = prop.PropagationConfig(topk=args.topk, radius=args.radius,
                                 queue_len=args.queue_len,
                                 temperature=args.temperature)
    _write_run_manifest(args.out, {
        "verb": "eval-prop", "checkpoint": args.checkpoint,
        "data": args.data, "propagation": dataclasses.asdict(cfg),
        "status": "running"})
    rows = prop.evaluate_propagation(model.encoder, dataset, cfg,
                                     max_clips=args.max_clips)
    with open(os.path.join(args.out, "jaccard.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["video_id", "object_id",
                                               "jaccard"])
        writer.writeheader()
        writer.writerows(rows)
    mean = prop.mean_jaccard(rows)
    _write_run_manifest(args.out, {
        "verb": "eval-prop", "checkpoint": args.checkpoint,
        "data": args.data, "propagation": dataclasses.asdict(cfg),
        "mean_jaccard": mean, "status": "done"})
    print(f"mean region Jaccard: {mean:.4f}")
    return 0


def cmd_report(args) -> int:
    summary = reporting.write_report(args.runs, args.out)
    print(summary.to_string(index=False))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "ablate": cmd_ablate,
    "eval-prop": cmd_eval_prop,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigurationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
