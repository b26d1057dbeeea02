"""Command line entry point: ``spoc <study-kind> --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import KINDS, StudyError, load_config, make_config, run_study
from .noise import NoiseError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spoc", description="Run a convergence study or identity check.")
    p.add_argument("kind", choices=KINDS, help="study kind")
    p.add_argument("--config", help="TOML file with study parameters (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the seed from the config")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--export-matrices", action="store_true", help="also dump mass/stiffness matrices as CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "out_dir": args.out}
    try:
        if args.config:
            cfg = load_config(args.config, args.kind, **overrides)
        else:
            cfg = make_config(args.kind, **{k: v for k, v in overrides.items() if v is not None})
        summary = run_study(cfg, export=args.export_matrices)
    except (StudyError, NoiseError, OSError) as exc:
        print(f"spoc: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary["result"], indent=2))
    print(f"wrote {cfg.out_dir}/{cfg.kind}.csv and {cfg.kind}.json", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
