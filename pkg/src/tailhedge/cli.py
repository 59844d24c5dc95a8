"""Command-line harness: train, eval, sweep, report.

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .harness import (ConfigError, emit_report, load_config, report_from_dict,
                      run_eval, run_sweep, run_train)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailhedge",
        description="Train and evaluate a tail-aware distributional hedging agent.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an agent from a TOML config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config's seed")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)

    p_sweep = sub.add_parser("sweep", help="volatility/risk-measure sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--checkpoint", default=None,
                         help="evaluate this checkpoint instead of training per cell")

    p_report = sub.add_parser("report", help="re-emit reports found in a directory")
    p_report.add_argument("--in", dest="in_dir", required=True)
    p_report.add_argument("--format", choices=("csv", "json"), required=True)
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    paths = run_train(cfg)
    print(f"checkpoint: {paths['checkpoint']}")
    print(f"metrics:    {paths['metrics']}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    report = run_eval(args.checkpoint, cfg)
    out = Path(cfg.output_dir)
    emit_report([report], "json", out)
    emit_report([report], "csv", out)
    agg = f"mean={report.mean:.6g} std={report.std:.6g} " \
          f"{report.risk.label}: var={report.var:.6g} cvar={report.cvar:.6g}"
    print(agg)
    print(f"reports written to {out}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    rows = run_sweep(cfg, checkpoint=args.checkpoint)
    print(f"{len(rows)} sweep cells written to {Path(cfg.output_dir) / 'sweep.csv'}")
    return 0


def _cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise ConfigError([f"--in: not a directory: {in_dir}"])
    reports = []
    for path in sorted(in_dir.glob("report*.json")):
        payload = json.loads(path.read_text())
        if isinstance(payload, dict):
            payload = [payload]
        reports.extend(report_from_dict(d) for d in payload)
    if not reports:
        raise ConfigError([f"--in: no report*.json files under {in_dir}"])
    written = emit_report(reports, args.format, in_dir)
    for path in written:
        print(path)
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval,
             "sweep": _cmd_sweep, "report": _cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        for msg in exc.messages:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:                     # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
