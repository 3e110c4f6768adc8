"""Command line: ``dacood run | report | gen-data | self-test``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, selfcheck
from .data import SyntheticSpec, gen_synthetic, write_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacood", description="Abstention-class OoD detection benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train models and evaluate every detector")
    run.add_argument("--config", required=True, help="experiment JSON file")

    report = sub.add_parser("report", help="re-render a saved report")
    report.add_argument("--in", dest="src", required=True, help="report.json, report.csv or an output directory")
    report.add_argument("--format", choices=["md", "csv"], default="md")

    gen = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    gen.add_argument("--spec", required=True, help="JSON with SyntheticSpec fields")
    gen.add_argument("--out", required=True, help="output CSV path")

    sub.add_parser("self-test", help="run metric oracles and the gradient check")
    return parser


def _run(args) -> int:
    cfg = bench.ExperimentConfig.load(args.config)
    report = bench.run_experiment(cfg)
    print(bench.emit_table(report, "markdown"), end="")
    print(f"wrote {cfg.resolve_output_dir()}")
    return 0


def _report(args) -> int:
    report = bench.load_report(args.src)
    print(bench.emit_table(report, args.format), end="")
    return 0


def _gen_data(args) -> int:
    spec_path = Path(args.spec)
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise bench.ConfigError(f"cannot read spec {spec_path}: {e.strerror}") from None
    d = gen_synthetic(SyntheticSpec.from_dict(raw))
    write_csv(d, args.out)
    print(f"wrote {d.n} samples ({d.dim} features) to {args.out}")
    return 0


def _self_test(args) -> int:
    ok = True
    for name, passed, msg in selfcheck.run_all():
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {msg}")
        ok &= passed
    return 0 if ok else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"run": _run, "report": _report, "gen-data": _gen_data, "self-test": _self_test}[args.command]
    try:
        return handler(args)
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"dacood {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
