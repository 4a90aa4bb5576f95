"""Command line entry point: ``svflow <experiment|check> [options]``.

Exit codes: 0 success, 1 run failure (oracle break, NaN, divergence),
2 configuration error.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, config_to_json, load_config

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
MAX_SEED = 2**64 - 1


def _seed(text):
    try:
        s = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= s <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64 - 1]")
    return s


def build_parser():
    parser = argparse.ArgumentParser(prog="svflow", description="SVFlow experiments and invariant checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--seed", type=_seed, help="override the config seed")
        p.add_argument("--out", default=None, help=f"output directory (default runs/{name})")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; VALUE is parsed as JSON")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    c = sub.add_parser("check", help="run the fast invariant and oracle suite")
    c.add_argument("--seed", type=_seed, default=0)
    return parser


def _failure_types():
    from ..attention import QuadratureError
    from ..metrics import IdentityMismatch
    from ..train import DivergenceError
    from .runners import OracleFailure

    return (OracleFailure, DivergenceError, QuadratureError, IdentityMismatch, FloatingPointError,
            ValueError)


def run_experiment(args):
    try:
        cfg = load_config(args.command, args.config, args.override)
        if args.seed is not None:
            cfg.seed = args.seed
    except ConfigError as e:
        print(f"svflow: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(config_to_json(cfg))
        return EXIT_OK
    from .runners import RUNNERS

    try:
        result = RUNNERS[args.command](cfg)
    except _failure_types() as e:
        print(f"svflow: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    out = Path(args.out or Path("runs") / args.command)
    result.write(out)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    for name, ok in sorted(result.targets.items()):
        print(f"{'PASS' if ok else 'MISS'}  {args.command}.{name}")
    print(f"wrote {len(result.files) + 1} files to {out}")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "check":
        from .checks import run_checks

        return EXIT_OK if run_checks(args.seed) else EXIT_FAILURE
    return run_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
