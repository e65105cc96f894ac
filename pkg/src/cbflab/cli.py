"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 blow-up or stability
failure, 4 failed run-time assertion.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .config import SUBCOMMANDS, ConfigError, build_config, parse_config_text
from .integrators import BlowUpError
from .io import OutputExistsError, prepare_output_dir
from .operators import RegimeError

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_ASSERT = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbflab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, scenario in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {scenario} scenario")
        p.add_argument("--config", type=Path, help="INI-style config file (defaults to the scenario preset)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--unsafe-regime", action="store_true", help="allow d=3 with r<3")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    scenario = SUBCOMMANDS[args.command]
    try:
        text = args.config.read_text() if args.config else ""
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        vals = parse_config_text(text, scenario)
        if args.seed is not None:
            vals["run"]["seed"] = args.seed
        if args.out is not None:
            vals["run"]["out"] = str(args.out)
        if args.unsafe_regime:
            vals["run"]["unsafe_regime"] = True
        cfg = build_config(vals, text)
        cfg.params.check_regime(cfg.grid.d, cfg.unsafe_regime)
        out = prepare_output_dir(cfg.out, args.force)
    except (ConfigError, RegimeError, OutputExistsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .experiments import run

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            result = run(cfg, out)
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        return EXIT_BLOWUP
    except (ValueError, RegimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"scenario": result.scenario, "ok": result.ok, "failures": result.failures, "out": str(out)}))
    return EXIT_OK if result.ok else EXIT_ASSERT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
