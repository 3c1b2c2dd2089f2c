import argparse
import json
import logging
import sys

from cli import commands
from cli.config import load_run_config, load_study_config
from core.errors import (
    ConfigError,
    DegenerateCurve,
    DegenerateEdge,
    NewtonDiverged,
    SingularSystem,
    SpPfemError,
)

logger = logging.getLogger("main")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sppfem",
        description="Structure-preserving finite element flows of closed anisotropic curves",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    parser.add_argument("--no-progress", action="store_true", help="hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one evolution from a config or manifest")
    run.add_argument("config")
    run.add_argument("--output-dir", help="override output_dir from the config")

    sweep = sub.add_parser("sweep", help="run a convergence study")
    sweep.add_argument("study")
    sweep.add_argument("--workers", type=int, help="override the worker count")

    kmin = sub.add_parser("kmin", help="print the minimal stabilizer table")
    kmin.add_argument("density", help="density spec, e.g. mfold:m=3,beta=1/9")
    kmin.add_argument("--alpha", type=float, required=True)
    kmin.add_argument("--output", help="write CSV here instead of stdout")

    distance = sub.add_parser("distance", help="manifold distance of two curve CSV files")
    distance.add_argument("curve_a")
    distance.add_argument("curve_b")

    generate = sub.add_parser("generate", help="write a generated initial curve to CSV")
    generate.add_argument("shape")
    generate.add_argument("--n", type=int, default=128)
    generate.add_argument("--params", default="{}", help="JSON object of generator parameters")
    generate.add_argument("--output", required=True)
    return parser


def configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def dispatch(args):
    progress = not args.no_progress
    if args.command == "run":
        config = load_run_config(args.config)
        if args.output_dir:
            config.data["output_dir"] = args.output_dir
        code, _ = commands.run_from_config(config, progress=progress)
        return code
    if args.command == "sweep":
        config = load_study_config(args.study)
        if args.workers:
            config.data["workers"] = args.workers
        code, _ = commands.sweep(config, progress=progress)
        return code
    if args.command == "kmin":
        return commands.kmin(args.density, args.alpha, args.output)
    if args.command == "distance":
        return commands.distance(args.curve_a, args.curve_b)
    try:
        params = json.loads(args.params)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid --params JSON: {exc.msg}", key="params") from None
    return commands.generate(args.shape, args.n, params, args.output)


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args)
    try:
        return dispatch(args)
    except (NewtonDiverged, SingularSystem) as exc:
        logger.error("%s", exc)
        return commands.EXIT_NEWTON
    except (DegenerateCurve, DegenerateEdge) as exc:
        logger.error("%s", exc)
        return commands.EXIT_DEGENERATE
    except (SpPfemError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return commands.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
