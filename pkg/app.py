# app.py
import argparse
import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables from .env file before the packages read their tunables
load_dotenv()

from handlers.calibrate_handler import handle_calibrate
from handlers.common_handler_utils import run_handler
from handlers.dump_handler import DUMP_SPLITS, handle_dump
from handlers.evaluate_handler import handle_evaluate
from handlers.rescore_handler import handle_rescore
from handlers.synth_handler import handle_synth
from handlers.train_handler import handle_train
from pipelines.calibration_pipeline import N_JOBS
from utils.config import load_config
from utils.errors import CalibrationToolkitError

logger = logging.getLogger(__name__)

COMMANDS = {
    "synth": handle_synth,
    "train": handle_train,
    "dump": handle_dump,
    "calibrate": handle_calibrate,
    "evaluate": handle_evaluate,
    "rescore": handle_rescore,
}
PARALLEL_COMMANDS = {"dump", "calibrate", "evaluate", "rescore"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibrate-structured",
        description="Calibrated confidence for structured predictions: synthesize, train, dump, calibrate, evaluate, rescore.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--out", help="output directory for every artifact")
    common.add_argument("--task", choices=["sequence-labeling", "span-ner", "extractive-qa"])
    common.add_argument("--dev-dump", help="dev sample dump (overrides paths.dev_dump)")
    common.add_argument("--test-dump", help="test sample dump (overrides paths.test_dump)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one config field; may be repeated")
    common.add_argument("--n-jobs", type=int, default=N_JOBS, help="joblib workers for per-instance work")
    common.add_argument("--log-level", default=os.environ.get("CALIBRATION_LOG_LEVEL", "INFO"))

    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, parents=[common], help=COMMANDS[name].__doc__)
        if name == "dump":
            sub.add_argument("--split", choices=["train", *DUMP_SPLITS, "all"], default="all",
                             help="split to sample (all = dev and test)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        overrides = list(args.overrides)
        if args.dev_dump:
            overrides.append(f"paths.dev_dump={args.dev_dump}")
        if args.test_dump:
            overrides.append(f"paths.test_dump={args.test_dump}")
        config = load_config(args.config).with_overrides(overrides, task=args.task, seed=args.seed, out_dir=args.out)
    except CalibrationToolkitError as e:
        logger.error(f"Invalid configuration: {e}", exc_info=True)
        return e.exit_code

    kwargs = {}
    if args.command in PARALLEL_COMMANDS:
        kwargs["n_jobs"] = args.n_jobs
    if args.command == "dump":
        kwargs["splits"] = DUMP_SPLITS if args.split == "all" else (args.split,)
    return run_handler(args.command, COMMANDS[args.command], config, **kwargs)


if __name__ == "__main__":
    sys.exit(main())
