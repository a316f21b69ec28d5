"""Command-line entry point.

Verbs: train (config-driven runs), sweep-table1 (the built-in
six-configuration comparison), gen-data (synthetic dataset trees),
compare (report vs reference figures), selftest (numerical smoke checks).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import generate_synthetic
from .runner import (
    ConfigError,
    DataSource,
    builtin_table1_sweep,
    compare_report,
    default_reference_path,
    format_comparison,
    parse_config,
    parse_synthetic_spec,
    run,
)
from .selftest import run_selftest


def _add_train(sub):
    p = sub.add_parser("train", help="run experiments from a JSON config file")
    p.add_argument("--config", required=True, help="path to the run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--parallel", type=int, default=1,
                   help="number of runs to execute concurrently")


def _add_sweep(sub):
    p = sub.add_parser("sweep-table1",
                       help="run the built-in six-configuration sweep")
    p.add_argument("--data", required=True,
                   help="'synthetic' or the root of an existing dataset tree")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--image-side", type=int, default=None,
                   help="model input side (default: dataset side for synthetic, 224 for trees)")
    p.add_argument("--parallel", type=int, default=1)


def _add_gen(sub):
    p = sub.add_parser("gen-data", help="write a synthetic two-domain dataset tree")
    p.add_argument("--spec", required=True,
                   help="JSON file of generator settings ('{}' selects all defaults)")
    p.add_argument("--out", required=True, help="dataset root to create")


def _add_compare(sub):
    p = sub.add_parser("compare", help="diff a sweep report against reference figures")
    p.add_argument("--report", required=True, help="report.csv produced by a sweep")
    p.add_argument("--reference", default=None,
                   help="reference csv (default: packaged table1_reference.csv)")


def _report_failures(report, out_dir):
    for name, error in report.errors.items():
        print(f"run {name} failed: {error}", file=sys.stderr)
    print(f"report written to {Path(out_dir) / 'report.csv'}")
    return 0 if report.ok else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mmdcnn",
        description="Train a small CNN with an MMD domain-adaptation regularizer.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_sweep(sub)
    _add_gen(sub)
    _add_compare(sub)
    sub.add_parser("selftest", help="run the built-in numerical checks")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            specs = parse_config(args.config)
            report = run(specs, args.out, parallel=args.parallel)
            return _report_failures(report, args.out)

        if args.command == "sweep-table1":
            if args.data == "synthetic":
                data = None
            else:
                data = DataSource(kind="tree", root=args.data)
            specs = builtin_table1_sweep(data=data, seed=args.seed, epochs=args.epochs,
                                         image_side=args.image_side)
            report = run(specs, args.out, parallel=args.parallel)
            return _report_failures(report, args.out)

        if args.command == "gen-data":
            spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
            spec = parse_synthetic_spec(spec_doc, path="spec")
            manifests = generate_synthetic(spec, args.out)
            for domain, manifest in manifests.items():
                print(f"{domain}: {manifest.counts}")
            return 0

        if args.command == "compare":
            reference = args.reference if args.reference else default_reference_path()
            result = compare_report(args.report, reference)
            print(format_comparison(result))
            return 0

        if args.command == "selftest":
            return run_selftest()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
