"""Command-line entry point ``bif``.

Every subcommand takes ``--config FILE`` (optional; defaults otherwise) and
``--out-dir DIR`` (required), plus ``--key value`` overrides for any config
key, e.g. ``bif run-all --out-dir runs/vi --inference sgld --seed 3``.
``BIF_SEED`` in the environment overrides the seed.  The exit code is 0 iff
every requested phase succeeded.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..errors import BayesForgetError
from .config import load_config
from .experiment import Pipeline, run_experiment

__all__ = ["main", "build_parser"]

log = logging.getLogger("bayesforget")

COMMANDS = {
    "gen-data": "generate the synthetic dataset and write the resolved config",
    "train": "train the posterior on the full dataset",
    "forget": "remove the requested datums from the trained posterior",
    "retrain": "retrain from scratch without the removed datums (oracle)",
    "certify": "compute the removal certificate of the processed posterior",
    "report": "write report.json and metrics.csv from the phase artifacts",
    "run-all": "run every phase in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bif", description="Bayesian inference forgetting experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--out-dir", required=True, help="directory for all artifacts")
    return parser


def parse_overrides(extra: Sequence[str]) -> dict:
    """Turn ``["--key", "value", ...]`` into ``{"key": "value"}``."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or i + 1 >= len(extra):
            raise SystemExit(f"bif: expected '--key value' overrides, got {tok!r}")
        out[tok[2:].replace("-", "_")] = extra[i + 1]
        i += 2
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        overrides["out_dir"] = args.out_dir
        cfg = load_config(args.config, overrides)
    except BayesForgetError as exc:
        print(f"bif: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run-all":
            rep = run_experiment(cfg, args.out_dir)
            if rep["status"] != "ok":
                print(f"bif: phase {rep['failed_phase']} failed: {rep['error']}", file=sys.stderr)
                return 1
            print(_summary(rep))
            return 0
        pipe = Pipeline(cfg, args.out_dir)
        phase = args.command.replace("-", "_")
        result = getattr(pipe, phase)()
        if args.command == "certify":
            print(result.summary())
        elif args.command == "report":
            print(_summary(result))
        return 0
    except (BayesForgetError, ValueError, FileNotFoundError) as exc:
        print(f"bif: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _summary(rep: dict) -> str:
    d = rep["distances"]
    cert = rep["certificate"]
    rate = rep["timings"].get("acceleration_rate")
    return (
        f"ε={cert['epsilon']:.6g} kind={cert['kind']} n={rep['n_remaining']} "
        f"dist(processed,retrain)={d['processed_retrain']:.4g} "
        f"dist(original,retrain)={d['original_retrain']:.4g} "
        f"acceleration={rate if rate is None else round(rate, 3)}"
    )


if __name__ == "__main__":
    sys.exit(main())
