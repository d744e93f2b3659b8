"""Command-line entry point: ``lnskit <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Every subcommand writes ``report.json`` (plus one CSV per table) to ``--out``,
or prints the JSON report when ``--out`` is omitted.  The exit status is 0 when
every check in the report passed, 1 when a check failed and 2 on a
configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TASKS, ExperimentConfig
from .errors import LnsError
from .harness import RunReport, run

log = logging.getLogger("lnskit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lnskit", description="LNS training and datapath experiments")
    sub = p.add_subparsers(dest="task", required=True)
    for task in TASKS:
        sp = sub.add_parser(task)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory for report.json and CSV tables")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
        if task == "datapath-conformance":
            sp.add_argument("golden", nargs="?", type=Path, help="golden-vector file (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict):
            raise LnsError("config file must hold a JSON object")
    data["task"] = args.task
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = str(args.out)
    if getattr(args, "golden", None) is not None:
        data["golden_file"] = str(args.golden)
    return ExperimentConfig.from_dict(data)


def write_report(rep: RunReport, out) -> None:
    if out is None:
        json.dump(rep.to_dict(), sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    for name, text in rep.tables.items():
        (out / f"{name}.csv").write_text(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args)
        rep = run(cfg, args.threads)
    except (LnsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_report(rep, cfg.out)
    for name, ok in rep.checks.items():
        log.info("%s: %s", name, "pass" if ok else "FAIL")
    if not rep.passed:
        failed = ", ".join(k for k, v in rep.checks.items() if not v)
        print(f"{args.task}: failed checks: {failed}", file=sys.stderr)
        return 1
    return 0
