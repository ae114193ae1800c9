"""Command-line entry point: ``patchood {fit,score,evaluate,synth,report}``.

Every flag can also be set through an environment variable named
``PATCHOOD_<FLAG>`` (upper case, dashes as underscores), e.g.
``PATCHOOD_WORKERS=8`` or ``PATCHOOD_MANIFEST=data/manifest.json``.
Command-line values win over the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .aggregate import DEFAULT_SIGMA_SCALE
from .errors import PatchOODError
from .pipeline import METHODS, RunConfig, cmd_evaluate, cmd_fit, cmd_report, cmd_score
from .synth import ShiftSpec, generate

ENV_PREFIX = "PATCHOOD_"

logger = logging.getLogger("patchood")


def _env(flag: str, default=None):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), default)


def _add(parser, flag, **kw):
    default = _env(flag, kw.pop("default", None))
    if kw.get("required") and default is not None:
        kw["required"] = False
    parser.add_argument(f"--{flag}", default=default, **kw)


def _run_options(p, *, model: bool, method: bool = True):
    _add(p, "manifest", type=Path, required=True, help="dataset manifest JSON")
    _add(p, "out", type=Path, required=True, help="run directory for masks, scores and reports")
    if model:
        _add(p, "model", type=Path, help="Gaussian model file (required for mahalanobis)")
    if method:
        _add(p, "method", choices=METHODS, default="mahalanobis")
        _add(p, "temperature", type=float, default=10.0, help="softmax temperature for temp_scaling")
        _add(p, "kl-invert", choices=("affine", "negate"), default="affine")
    _add(p, "sigma-scale", type=float, default=DEFAULT_SIGMA_SCALE, help="center-weight sigma as a fraction of patch size")
    _add(p, "workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchood", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default=_env("log-level", "INFO"))
    # also accepted after the subcommand; SUPPRESS keeps the top-level value when omitted
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the training-feature Gaussian")
    _add(p, "manifest", type=Path, required=True)
    _add(p, "model", type=Path, required=True)
    _add(p, "workers", type=int, default=1)

    p = sub.add_parser("score", parents=[common], help="write uncertainty masks and raw subject scores")
    _run_options(p, model=True)

    p = sub.add_parser("evaluate", parents=[common], help="normalize scores and write report + scatter CSV")
    _run_options(p, model=False)
    _add(p, "target-tpr", type=float, default=0.95)
    _add(p, "bins", type=int, default=10)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    _add(p, "spec", type=Path, help="ShiftSpec JSON (fields default when omitted)")
    _add(p, "out", type=Path, required=True)
    _add(p, "seed", type=int, help="override the spec's seed")

    p = sub.add_parser("report", parents=[common], help="compare report JSONs in one table")
    p.add_argument("reports", nargs="+", type=Path)
    _add(p, "out", type=Path, help="also write the table to this file")
    return parser


def _config(args) -> RunConfig:
    return RunConfig(
        manifest=args.manifest,
        out=args.out,
        model=getattr(args, "model", None),
        method=getattr(args, "method", "mahalanobis"),
        temperature=float(getattr(args, "temperature", 10.0)),
        sigma_scale=float(getattr(args, "sigma_scale", DEFAULT_SIGMA_SCALE)),
        target_tpr=float(getattr(args, "target_tpr", 0.95)),
        bins=int(getattr(args, "bins", 10)),
        workers=int(args.workers),
        kl_invert=getattr(args, "kl_invert", "affine"),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            cfg = RunConfig(manifest=args.manifest, out=args.model.parent, model=args.model, workers=int(args.workers))
            cmd_fit(cfg)
        elif args.command == "score":
            summary = cmd_score(_config(args))
            if not summary.ok:
                print(f"{len(summary.failures)} subject(s) failed: {', '.join(summary.failures)}", file=sys.stderr)
                return 1
        elif args.command == "evaluate":
            doc = cmd_evaluate(_config(args))
            print(json.dumps(doc, indent=2, sort_keys=True))
        elif args.command == "synth":
            doc = json.loads(args.spec.read_text()) if args.spec else {}
            if args.seed is not None:
                doc["seed"] = int(args.seed)
            generate(ShiftSpec.from_dict(doc), args.out)
        elif args.command == "report":
            table = cmd_report(args.reports)
            if args.out:
                Path(args.out).write_text(table, encoding="utf-8")
            print(table, end="")
    except (PatchOODError, ValueError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
