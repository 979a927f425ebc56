#!/usr/bin/env python3
"""
pkin: time-periodic and steady kinetic solutions in a slab with oscillating wall temperatures.
"""

import argparse
import logging
import sys

import termcolor as tc

from pkin.config import MODES, RunSpec, apply_overrides, load_spec
from pkin.errors import PkinError
from pkin.runner import run
from pkin.util.logging import init_logger


_DESCRIPTION = """pkin: periodic solutions of the linearized and nonlinear kinetic equation in a slab whose
walls re-emit particles diffusely at an oscillating temperature."""

_EPILOG = """example usages:

# Run the invariant suite on the reduced verify grid
python3 -m pkin --mode verify --out out/verify

# Periodic solution, then the perturbation decay and its fit
python3 -m pkin --config run.cfg --mode periodic --out out/run
python3 -m pkin --config run.cfg --mode evolve --out out/run
python3 -m pkin --config run.cfg --mode fit-decay --out out/run

# Override single keys
python3 -m pkin --mode periodic --override wall.delta1=0.02 --override model.gamma=-1
"""


def main() -> int:
    init_logger()

    # fmt: off
    parser = argparse.ArgumentParser(
        description=_DESCRIPTION,
        epilog=_EPILOG,
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument("--config", type=str, default=None,
                        help="Path to a run config with `block.key = value` lines.")
    parser.add_argument("--mode", choices=MODES, default=None,
                        help="Mode to run; overrides run.mode.")
    parser.add_argument("--seed", type=int, default=None,
                        help="Run seed; overrides run.seed.")
    parser.add_argument("--out", type=str, default=None,
                        help="Output directory; overrides run.output.")
    parser.add_argument("--override", type=str, action="append", default=[],
                        help="block.key=value, repeatable.")
    parser.add_argument("--debug", action="store_true",
                        help="Log at debug level.")
    args = parser.parse_args()
    # fmt: on

    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    overrides = list(args.override)
    if args.mode is not None:
        overrides.append(f"run.mode={args.mode}")
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            logging.error(f"ConfigurationError: --seed must be an unsigned 64-bit integer, got {args.seed}")
            return 1
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.output={args.out}")

    try:
        spec = RunSpec() if args.config is None else load_spec(args.config)
        spec = apply_overrides(spec, overrides)
    except PkinError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code

    logging.info(f"Mode: {tc.colored(spec.run.mode, 'blue')}, seed {spec.run.seed}, output {spec.run.output}")
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
