"""Command line entry point: ``espretrain run|report-memory|export-curve``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import EsPretrainError
from .memory import memory_report, reference_scale_table
from .runner import load_config, loss_curve_export, run


def _cmd_run(args) -> int:
    config = load_config(args.config)

    def progress(step):
        if args.log_every and step.iteration % args.log_every == 0:
            print(f"iter {step.iteration:>6}  loss {step.loss:.5f}  |update| {step.update_norm:.3e}", flush=True)

    outcome = run(config, resume=args.resume, on_iteration=progress)
    if outcome.status:
        print(f"error: {outcome.message}", file=sys.stderr)
    else:
        print(f"finished {outcome.iterations_done} iterations; artifacts in {outcome.output_dir}")
    return outcome.status


def _cmd_report_memory(args) -> int:
    config = load_config(args.config)
    report = memory_report(config.model, config.es, config.micro_batch, config.data.max_seq_len)
    print(report.format())
    if args.reference_scale:
        print()
        print(f"Reference model family (micro-batch {config.micro_batch}, sequence {config.data.max_seq_len}):")
        print(reference_scale_table(config.es, config.micro_batch, config.data.max_seq_len))
    return 0


def _cmd_export_curve(args) -> int:
    out = args.output or Path(args.metrics).with_name("loss_curve.csv")
    series = loss_curve_export(args.metrics, out, window=args.window)
    print(f"wrote {len(series)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="espretrain", description="Forward-only ES pretraining of a small causal LM.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and info messages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train from a TOML config")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in output_dir")
    p.add_argument("--log-every", type=int, default=10, metavar="N", help="print progress every N iterations (0 = quiet)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report-memory", help="print the ES vs backprop memory accounting")
    p.add_argument("config")
    p.add_argument("--reference-scale", action="store_true", help="also tabulate the 0.5B to 32B reference model sizes")
    p.set_defaults(func=_cmd_report_memory)

    p = sub.add_parser("export-curve", help="write iteration, loss and smoothed loss from metrics.csv")
    p.add_argument("metrics")
    p.add_argument("-o", "--output", help="output CSV (default: loss_curve.csv next to the metrics)")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=_cmd_export_curve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EsPretrainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
