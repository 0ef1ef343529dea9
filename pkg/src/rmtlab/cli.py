"""Command-line entry point.

    rmtlab <kind> --manifest m.json [--seed S] [--workers W] [--out DIR]
    rmtlab summarize --out DIR

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
The worker count can also be set through the RMTLAB_WORKERS environment
variable, which overrides both the manifest and the flag.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .errors import ConfigError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmtlab",
        description="Seeded random-matrix experiments: sampling, local laws, "
        "eigenvector statistics, Dyson Brownian motion, matching observables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in harness.EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment from a manifest")
        p.add_argument("--manifest", required=True, help="path to the JSON manifest")
        p.add_argument("--seed", type=int, default=None, help="override the manifest seed")
        p.add_argument("--workers", type=int, default=None, help="worker process count")
        p.add_argument("--out", default=None, help="output directory")
    p = sub.add_parser("summarize", help="summarize persisted result rows")
    p.add_argument("--out", required=True, help="directory holding results.jsonl")
    return parser


def _load_manifest(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"manifest: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest: invalid JSON ({exc})")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            path = f"{args.out}/results.jsonl"
            try:
                with open(path) as fh:
                    rows = [json.loads(line) for line in fh if line.strip()]
            except FileNotFoundError:
                raise ConfigError(f"out: no results.jsonl under {args.out}")
            summary = harness.summarize(rows)
            json.dump(summary, sys.stdout, indent=2, sort_keys=True)
            print()
            return EXIT_OK
        manifest = _load_manifest(args.manifest)
        if args.seed is not None:
            manifest["seed"] = args.seed
        _, summary = harness.run(
            manifest, out_dir=args.out, workers=args.workers, kind=args.command
        )
        json.dump(summary, sys.stdout, indent=2, sort_keys=True, default=str)
        print()
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
