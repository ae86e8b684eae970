"""Command-line entry point: ``trapmetric {calibrate,estimate,evaluate,simulate}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

from trapmetric import pipeline
from trapmetric.pipeline import EXIT_FATAL, RunConfig

logger = logging.getLogger("trapmetric")

_HELP = {
    "input": "input root holding one directory per transect",
    "output": "output directory for this run",
    "percentile": "depth percentile sampled inside each box (default 20)",
    "confidence": "minimum detection confidence (default 0.5)",
    "categories": "comma-separated detection categories to report (default animal)",
    "seed": "RNG seed for pixel subsampling and RANSAC",
    "inlier_threshold": "RANSAC inlier threshold; 'mad' for 1.25 x MAD of y (default)",
    "jobs": "parallel workers",
    "force_planar": "calibrate even when landmarks look coplanar",
    "force_low_inliers": "keep low-consensus observations in the evaluation",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, action="store_const", const=True, default=None, help=_HELP.get(f.name))
        else:
            p.add_argument(flag, default=None, metavar=f.name.upper(), help=_HELP.get(f.name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trapmetric",
        description="Calibrate camera-trap transects and estimate camera-to-animal distances.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("calibrate", "calibrate every transect under --input"),
        ("estimate", "estimate distances for every observation"),
        ("evaluate", "compare estimates with ground truth"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        if name == "evaluate":
            p.add_argument("--estimates", help="estimates CSV (default OUTPUT/estimates.csv)")
            p.add_argument("--groundtruth", help="ground-truth CSV (default: every INPUT/*/groundtruth.csv)")
    p = sub.add_parser("simulate", help="write synthetic transects from a JSON scene spec")
    p.add_argument("--spec", required=True, help="JSON scene spec")
    p.add_argument("--output", required=True, help="root directory to write transects into")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is None:
            continue
        overrides[f.name] = raw if isinstance(raw, bool) else pipeline._coerce(f.name, str(raw))
    return pipeline.build_config(args.config, **overrides)


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TRAPMETRIC_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return pipeline.run_simulate(args.spec, args.output)
    try:
        cfg = _config_from_args(args)
    except (OSError, ValueError) as exc:
        logger.error("bad configuration: %s", exc)
        return EXIT_FATAL
    if not cfg.output or (args.command != "evaluate" and not cfg.input):
        logger.error("--input and --output are required")
        return EXIT_FATAL
    try:
        if args.command == "calibrate":
            return pipeline.run_calibrate(cfg)
        if args.command == "estimate":
            return pipeline.run_estimate(cfg)
        if not (cfg.input or args.groundtruth):
            logger.error("evaluate needs --input or --groundtruth")
            return EXIT_FATAL
        return pipeline.run_evaluate(cfg, args.estimates, args.groundtruth)
    except (OSError, ValueError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
