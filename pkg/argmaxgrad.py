# argmaxgrad.py

import argparse
import json
import logging
import sys

from src.data_io import DataError
from src.dataset_fetch import fetch
from src.dvae import ConfigurationError
from src.experiments import SpecError, load_specs, run
from src.reporting import CheckpointError
from src.structured_map import CapacityError, SolverPreconditionError
from src.tensor_autodiff import DomainError, NumericFailure

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SPEC_ERRORS = (
    SpecError,
    ConfigurationError,
    CheckpointError,
    CapacityError,
    SolverPreconditionError,
    DomainError,
)

logger = logging.getLogger("argmaxgrad")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="argmaxgrad",
        description="Discrete VAE gradient estimators: training, profiling, data fetch.",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment spec (object or list of objects)")
    p_run.add_argument("spec", help="path to a JSON spec")
    p_run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted spec field, e.g. train.epochs=5")

    p_prof = sub.add_parser("profile", help="bias/variance profile of the estimators in a spec")
    p_prof.add_argument("spec", help="path to a JSON spec")
    p_prof.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p_fetch = sub.add_parser("fetch", help="download and verify a dataset")
    p_fetch.add_argument("dataset", choices=["mnist", "fashion"])
    p_fetch.add_argument("target_dir")
    return parser


def _short_summary(profile: dict) -> dict:
    keys = ["kind", "final_test_loss", "baseline_test_loss", "final_accuracy", "best_encoder",
            "wall_seconds", "config_hash"]
    return {k: profile[k] for k in keys if profile.get(k) is not None}


def _fail(kind: str, err: Exception, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(err)}))
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        if args.verb == "fetch":
            paths = fetch(args.dataset, args.target_dir)
            print(json.dumps({"dataset": args.dataset, "files": [str(p) for p in paths]}, indent=2))
            return EXIT_OK

        overrides = list(args.overrides)
        if args.verb == "profile":
            overrides.append("kind=bias_variance")
        specs = load_specs(args.spec, overrides)

        summaries = []
        for spec in specs:
            logger.info("running %s -> %s", spec.kind, spec.output.directory)
            summaries.append(_short_summary(run(spec)))
    except SPEC_ERRORS as e:
        return _fail("spec_error", e, EXIT_SPEC)
    except DataError as e:
        return _fail("data_error", e, EXIT_DATA)
    except NumericFailure as e:
        return _fail("numeric_failure", e, EXIT_NUMERIC)

    # Pretty-print a short summary to stdout
    print(json.dumps(summaries[0] if len(summaries) == 1 else summaries, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
