"""Command line entry point: ``robust-prefix <subcommand> [--config FILE] [--section.field VALUE ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import torch

from .experiment import (
    FORMATS,
    ExperimentConfig,
    ExperimentConfigError,
    emit_report,
    load_bundle,
    render_json,
    run_experiment,
)

THREADS_ENV = "ROBUST_PREFIX_THREADS"

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

_COMMANDS = {
    "synth-data": "generate the synthetic task",
    "train": "pretrain the LM and tune the prefixes",
    "build-manifold": "build the per-layer projection matrices",
    "attack": "run the configured attacks",
    "eval": "evaluate prefixes on clean and attacked data",
    "defend": "select and apply the test-time defense",
    "analyze": "layer comparison, distraction metrics, mixed stream, normalization variants",
    "run-all": "every stage plus reports in all formats",
}


def config_flags(cls: type = ExperimentConfig, prefix: str = "") -> list[str]:
    """Dotted flag names for every leaf config field."""
    out = []
    defaults = cls()
    for f in dataclasses.fields(cls):
        value = getattr(defaults, f.name)
        if dataclasses.is_dataclass(value):
            out += config_flags(type(value), f"{prefix}{f.name}.")
        else:
            out.append(f"{prefix}{f.name}")
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_path(doc: dict, dotted: str, value) -> None:
    *head, leaf = dotted.split(".")
    for k in head:
        doc = doc.setdefault(k, {})
    doc[leaf] = value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    ap = argparse.ArgumentParser(prog="robust-prefix", description="Robust prefix-tuning experiment harness.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("--config", help="JSON config file; flags override its values")
        g = p.add_argument_group("config fields (JSON literals or bare strings)")
        for flag in config_flags():
            g.add_argument(f"--{flag}", dest=f"cfg:{flag}", metavar="VALUE")
    rep = sub.add_parser("report", help="render a saved bundle", parents=[common])
    rep.add_argument("--bundle", required=True, help="bundle.json written by a previous command")
    rep.add_argument("--format", default="text", help=f"one of {', '.join(FORMATS)}")
    rep.add_argument("--output_dir", help="defaults to the bundle's directory")
    return ap


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ExperimentConfigError("config", f"cannot read {args.config}: {e}") from e
    for key, raw in vars(args).items():
        if key.startswith("cfg:") and raw is not None:
            _set_path(doc, key[4:], _parse_value(raw))
    cfg = ExperimentConfig.from_dict(doc)
    cfg.validate()
    return cfg


def _run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    until = "all" if args.command == "run-all" else args.command
    bundle = run_experiment(cfg, until=until)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bundle.json").write_text(render_json(bundle))
    if args.command == "run-all":
        for fmt in FORMATS:
            emit_report(bundle, fmt, out)
    if bundle.status != "complete":
        print(f"partial bundle: stage {bundle.failed_stage} failed: {bundle.error}", file=sys.stderr)
        return EXIT_CONFIG if bundle.failed_stage == "config" else EXIT_PARTIAL
    print(f"{args.command}: complete, checksum {bundle.checksum()}")
    return EXIT_OK


def _report(args: argparse.Namespace) -> int:
    try:
        bundle = load_bundle(args.bundle)
    except (OSError, ValueError, TypeError) as e:
        raise ExperimentConfigError("report", f"cannot read bundle {args.bundle}: {e}") from e
    path = emit_report(bundle, args.format, args.output_dir or Path(args.bundle).parent)
    print(path)
    return EXIT_OK if bundle.status == "complete" else EXIT_PARTIAL


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return _report(args) if args.command == "report" else _run(args)
    except ExperimentConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
