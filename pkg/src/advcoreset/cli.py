"""Command-line surface: train, evaluate, compare, sweep, select-trace.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
One run occupies one directory with fixed filenames (config.txt,
metrics.jsonl, select_trace.jsonl, checkpoint_final.ckpt, summary.json).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import config as cfgmod
from . import data, evaluation, models, training
from .config import ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _checkpoint_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _run_training(values: dict[str, str], out_dir: str) -> dict:
    cfg = cfgmod.resolve(values)
    dataset = data.parse_dataset_uri(cfg["dataset.uri"])
    eval_ds = None
    if cfg["dataset.eval_uri"]:
        eval_ds = data.parse_dataset_uri(cfg["dataset.eval_uri"])
    spec = cfgmod.build_model_spec(cfg, dataset)
    state = models.init(spec, seed=cfg["run.seed"])
    train_cfg = cfgmod.build_train_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.freeze(values, os.path.join(out_dir, "config.txt"))
    final, records = training.train(dataset, state, train_cfg,
                                    out_dir=out_dir, eval_dataset=eval_ds)
    ckpt = os.path.join(out_dir, "checkpoint_final.ckpt")
    robust = next((r.robust_acc for r in reversed(records)
                   if r.robust_acc is not None), None)
    summary = {
        "final_clean_acc": records[-1].clean_acc,
        "final_robust_acc": robust,
        "total_seconds": sum(r.seconds for r in records),
        "epochs": len(records),
        "checkpoint_digest": _checkpoint_digest(ckpt),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def cmd_train(args, overrides) -> int:
    try:
        values = cfgmod.parse_config_file(args.config)
        cfgmod.apply_overrides(values, overrides)
        cfg = cfgmod.resolve(values)
        out_dir = args.out or cfgmod.output_dir(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = _run_training(values, out_dir)
    except training.TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args, overrides) -> int:
    try:
        values = cfgmod.apply_overrides({}, overrides)
        cfg = cfgmod.resolve(values)
        state = models.load_checkpoint(args.checkpoint)
        dataset = data.parse_dataset_uri(args.dataset)
        spec = cfgmod.build_eval_attack(cfg)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = evaluation.evaluate(state, dataset, spec, seed=cfg["run.seed"])
    except Exception as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        rows, table = evaluation.compare_runs(*args.metrics)
    except (ValueError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_sweep(args, overrides) -> int:
    try:
        values = cfgmod.parse_config_file(args.config)
        cfgmod.apply_overrides(values, overrides)
        if args.axis not in cfgmod.KNOWN_KEYS:
            raise ConfigError(f"unknown sweep axis {args.axis!r}")
        sweep_values = [v for v in args.values.split(",") if v]
        if not sweep_values:
            raise ConfigError("empty sweep value list")
        cfg = cfgmod.resolve(dict(values))
        out_root = args.out or cfgmod.output_dir(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    results = []
    for val in sweep_values:
        run_values = dict(values)
        run_values[args.axis] = val
        try:
            cfgmod.resolve(dict(run_values))
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        run_dir = os.path.join(out_root, f"{args.axis.replace('.', '_')}_{val}")
        try:
            summary = _run_training(run_values, run_dir)
        except training.TrainingError as exc:
            print(f"training failed at {args.axis}={val}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        results.append({args.axis: val, **summary})
    base = results[0]["total_seconds"]
    header = f"{args.axis:>16} {'clean':>7} {'robust':>7} {'time(s)':>9} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for r in results:
        robust = "-" if r["final_robust_acc"] is None else f"{r['final_robust_acc']:.4f}"
        print(f"{r[args.axis]:>16} {r['final_clean_acc']:>7.4f} {robust:>7} "
              f"{r['total_seconds']:>9.2f} {base / r['total_seconds']:>8.2f}")
    with open(os.path.join(out_root, "sweep.jsonl"), "w") as fh:
        for r in results:
            fh.write(json.dumps(r) + "\n")
    return EXIT_OK


def cmd_select_trace(args) -> int:
    path = args.run_dir
    if os.path.isdir(path):
        path = os.path.join(path, "select_trace.jsonl")
    if not os.path.exists(path):
        print(f"usage error: no selection trace at {path}", file=sys.stderr)
        return EXIT_USAGE
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                print(f"epoch {rec['epoch']:>4}  solver {rec['solver']:<10} "
                      f"k {rec['k']:>5}  matching_error {rec['matching_error']:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="advcoreset",
        description="Robust training with adversarial coreset selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("config")
    p_train.add_argument("--out", default=None)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset")
    p_eval.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="compare run metrics files")
    p_cmp.add_argument("metrics", nargs="+")
    p_cmp.add_argument("--out", default=None)

    p_sweep = sub.add_parser("sweep", help="vary one config key over values")
    p_sweep.add_argument("config")
    p_sweep.add_argument("axis")
    p_sweep.add_argument("values")
    p_sweep.add_argument("--out", default=None)

    p_trace = sub.add_parser("select-trace", help="print a run's selection trace")
    p_trace.add_argument("run_dir")

    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit:
        return EXIT_USAGE
    # every unrecognized token must be a --section.key=value override
    for token in extra:
        if not (token.startswith("--") and "=" in token):
            print(f"usage error: unrecognized argument {token!r}", file=sys.stderr)
            return EXIT_USAGE

    if args.command == "train":
        return cmd_train(args, extra)
    if args.command == "evaluate":
        return cmd_evaluate(args, extra)
    if args.command == "compare":
        return cmd_compare(args)
    if args.command == "sweep":
        return cmd_sweep(args, extra)
    return cmd_select_trace(args)


if __name__ == "__main__":
    sys.exit(main())
