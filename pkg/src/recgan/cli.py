"""``recgan`` command line: one pipeline stage per invocation.

Exit status: 0 success, 1 validation error (bad config, missing input),
2 runtime failure.  Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline, selfcheck

logger = logging.getLogger("recgan")

COMMANDS = {
    "synth": "generate a synthetic event log and catalog with a planted signal",
    "ingest": "parse events, segment visitors, build interaction matrices",
    "encode": "arithmetic-code interaction matrices into coded.rgc",
    "train": "train the coupled GAN on coded.rgc",
    "sample": "draw binarized realizations from the trained model",
    "decode": "decode realizations into recommended item sets",
    "eval": "per-segment CVR and category Jaccard",
    "nulltest": "density-matched random baseline",
    "report": "render report.json / report.txt",
    "selfcheck": "codec round trip, gradient check and metric oracle",
}

# flag dest -> config key
FLAG_KEYS = {"seed": "seed", "epochs": "gan.epochs", "batch_size": "gan.batch_size"}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-w", "--workdir", default=".", help="artifact directory (default: .)")
    common.add_argument("-c", "--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel workers (default: available cores)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, ordered reductions")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    common.add_argument("--format", choices=("json", "text", "both"), default="both",
                        help="report format (default: both)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="recgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, help_text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def effective_config(args):
    cfg = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise pipeline.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg[key.strip()] = value
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest)
        if value is not None:
            cfg[key] = value
    return cfg


def _run(args):
    if args.command == "selfcheck":
        results = selfcheck.run_all()
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return 0 if all(ok for _, ok, _ in results) else 2
    cfg = effective_config(args)
    workers = 1 if args.deterministic else (args.workers or os.cpu_count() or 1)
    extra = {}
    if args.command == "train":
        extra["checkpoint_every"] = args.checkpoint_every
    elif args.command == "report":
        extra["fmt"] = args.format
    limit = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    with limit:
        result = pipeline.run_stage(args.command, args.workdir, cfg, workers=workers, **extra)
    if args.command == "report" and args.format != "json":
        sys.stdout.write(result.to_text())
    else:
        logger.info("%s done: %s", args.command, result if isinstance(result, dict) else "ok")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (pipeline.ConfigError, pipeline.MissingInput, ValueError) as exc:
        print(f"recgan {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"recgan {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
