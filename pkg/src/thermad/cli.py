"""Command-line entry point: ``thermad <command> --config cfg.json [--set key=value ...]``.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, bundled_config, dump_config, validate_config
from .pipeline import OUTPUT_ROOT_ENV, STAGES, Run, run_stage

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _config_path(value):
    if value is None:
        return None
    if Path(value).exists():
        return Path(value)
    if value in ("demo", "benchmark"):
        return bundled_config(value)
    return Path(value)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="thermad",
        description="Simulate thermogram sequences, train conditional encoder-decoders and "
                    "score them with the contour-based detector.",
        epilog=f"Outputs go to --out, else config.output_dir, else ${OUTPUT_ROOT_ENV}/<name> "
               f"(default runs/<name>). 'demo' and 'benchmark' name the bundled configs.",
    )
    parser.add_argument("--version", action="version", version=f"thermad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p):
        p.add_argument("-c", "--config", help="JSON config file, or 'demo' / 'benchmark'")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set trainer.max_epochs=20 (repeatable)")

    helps = {
        "simulate": "render raw sequences and write the manifests",
        "preprocess": "background-subtract, normalise, split and store sequences",
        "train": "train every configured model variant",
        "score": "compute per-step anomaly scores on calibration and test sequences",
        "evaluate": "calibrate thresholds, run ablations and ROC analysis",
        "report": "write metric/ROC/score CSVs, JSON summary and plots",
        "all": "run every stage in order",
    }
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=helps[name])
        common(p)
        p.add_argument("-o", "--out", help="run directory")
    p = sub.add_parser("validate-config", help="print the resolved config with defaults filled in")
    common(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = validate_config(_config_path(args.config), args.overrides)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    run = Run(cfg, args.out).init()
    try:
        run_stage(run, args.command)
    except Exception as exc:  # noqa: BLE001 - reported and turned into an exit status
        logging.getLogger("thermad").exception("%s failed: %s", args.command, exc)
        return EXIT_FAILURE
    finally:
        run.close()
    print(run.root)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
