"""Command line front end for the experiment drivers.

Usage: ``hiersim <experiment> --out <dir> [--config <file>] [--seed <u64>]
[--emulator | --solver] [--likelihood exact|approx]``.  Without a config
file the package defaults apply; an empty file means the same thing.  The
``HIERSIM_NUM_THREADS`` environment variable caps the JIT thread pool and
``HIERSIM_NO_NUMBA`` selects the pure-numpy kernels.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from hiersim import __version__, _kernels, experiments
from hiersim.config import ConfigError, GlacierConfig, InferenceSettings, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiersim",
        description="Calibration experiments for the ice sheet test system.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "experiment",
        choices=sorted(experiments.EXPERIMENTS),
        help="which study to run",
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        metavar="FILE",
        help="key = value configuration file; omitted or empty means defaults",
    )
    parser.add_argument(
        "--out",
        type=Path,
        required=True,
        metavar="DIR",
        help="output directory for CSVs and the manifest (created if missing)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=0,
        metavar="U64",
        help="root seed for every random stream (default 0)",
    )
    model = parser.add_mutually_exclusive_group()
    model.add_argument(
        "--emulator",
        action="store_true",
        help="use the trained emulator for the model means",
    )
    model.add_argument(
        "--solver",
        action="store_true",
        help="use the finite-difference solver for the model means",
    )
    parser.add_argument(
        "--likelihood",
        choices=("exact", "approx"),
        default=None,
        help="likelihood route where the experiment offers a choice (default exact)",
    )
    return parser


def _configure_threads() -> None:
    """Apply the thread-count environment variable to the JIT runtime.

    The kernels are sequential, so the thread count never changes results;
    the cap just keeps the runtime from claiming cores it will not use.
    """
    raw = os.environ.get("HIERSIM_NUM_THREADS")
    if not raw or not _kernels.NUMBA_ENABLED:
        return
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(
            f"HIERSIM_NUM_THREADS must be an integer, got {raw!r}"
        ) from None
    import numba

    numba.set_num_threads(max(1, min(requested, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not 0 <= args.seed < 2**64:
        parser.error(f"seed must fit an unsigned 64-bit integer, got {args.seed}")
    mean_model = "emulator" if args.emulator else "solver" if args.solver else None

    try:
        _configure_threads()
        if args.config is None:
            cfg, settings = GlacierConfig(), InferenceSettings()
        else:
            cfg, settings = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"hiersim: {exc}", file=sys.stderr)
        experiments.write_failure_manifest(args.out, args.experiment, args.seed, "config", exc)
        return 1

    try:
        experiments.run_experiment(
            args.experiment,
            cfg,
            settings,
            args.out,
            args.seed,
            mean_model=mean_model,
            likelihood=args.likelihood,
        )
    except Exception as exc:
        print(f"hiersim: {args.experiment} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
