"""Command-line entry point: ``hmlrcast <command> [options]``.

Settings come from built-in defaults, then the ``--config`` JSON file, then
command-line flags; later sources win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources

from . import __version__, pipeline
from .ingest import MetadataFormatError
from .pipeline import PipelineError, RunConfig

COMMANDS = {
    "simulate": pipeline.run_simulate,
    "build": pipeline.run_build,
    "fit": pipeline.run_fit,
    "predict": pipeline.run_predict,
    "score": pipeline.run_score,
    "report": pipeline.run_report,
    "verify": pipeline.run_verify,
}


def demo_config_path() -> str:
    return str(resources.files("hmlrcast") / "data" / "demo_config.json")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration (use 'demo' for the bundled example)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="concurrent fit tasks (default: CPU count)")
    p.add_argument("--specs", help="'all', 'hmlr' or comma-separated model codes such as SLM,CCD,baseline")
    p.add_argument("--start-date", dest="start_date", help="first submission date (a Wednesday)")
    p.add_argument("--num-weeks", dest="num_weeks", type=int, help="number of weekly submission dates")
    p.add_argument("--out-dir", dest="out_dir", help="run directory")
    p.add_argument("--norm", choices=["euclidean", "paper", "sum_of_squares"], help="energy score norm")
    p.add_argument("--metadata", help="sequence metadata TSV (build)")
    p.add_argument("--warmup", type=int, help="sampler warmup iterations (fit)")
    p.add_argument("--iterations", type=int, help="sampler total iterations (fit)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmlrcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "write synthetic metadata from the config's synth section",
        "build": "build training and evaluation vintages for each submission date",
        "fit": "sample every (date, model) posterior",
        "predict": "store thinned prevalence draws and posterior means",
        "score": "energy and Brier scores plus aggregate tables",
        "report": "plot-ready log-relative score tables",
        "verify": "check every manifest artifact against its content hash",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[_common()], help=text)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    path = demo_config_path() if args.config == "demo" else args.config
    overrides = {k: getattr(args, k) for k in
                 ("seed", "workers", "specs", "start_date", "num_weeks", "out_dir", "norm", "metadata")}
    config = RunConfig.load(path, **overrides)
    sampler = dict(config.sampler)
    if args.warmup is not None:
        sampler["warmup"] = args.warmup
    if args.iterations is not None:
        sampler["total"] = args.iterations
    config.sampler = sampler
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        stats = COMMANDS[args.command](config)
    except (PipelineError, MetadataFormatError, OSError, ValueError) as exc:
        print(f"hmlrcast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **stats}, sort_keys=True))
    return 1 if stats.get("failed") else 0


if __name__ == "__main__":
    sys.exit(main())
