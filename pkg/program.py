# Crab - Federated Learning Recovery

# Description: Command line entry point. Trains a simulated federated model
#              under a poisoning attack with selective history storage,
#              recovers it once the malicious clients are known and
#              evaluates the recovery against the baselines.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import argparse
import json
import os
import sys

from Scripts.config import load_config
from Scripts.error_handler import CrabError
from Scripts.experiment import ExperimentRunner
from Scripts.folder_handler import HISTORY_DIR, FolderHandler
from Scripts.history_store import read_manifest
from Scripts.logging_handler import log_obj, set_log_level
from Scripts.recovery_engine import RECOVERY_METHODS

STAGES = ("train", "recover", "evaluate", "run")
UNEXPECTED_EXIT = 3


def build_parser():
    """
    Builds the argument parser with one subcommand per pipeline stage.

    Returns:
        argparse.ArgumentParser: The parser.
    """
    parser = argparse.ArgumentParser(
        prog="crab",
        description="Selective-history recovery of poisoned federated "
                    "models.")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="console verbosity")
    commands = parser.add_subparsers(dest="command", required=True)
    helps = {"train": "federated training with selective storage",
             "recover": "rollback and recovery",
             "evaluate": "metrics, bound audit and report",
             "run": "the full pipeline"}
    for stage in STAGES:
        sub = commands.add_parser(stage, help=helps[stage])
        sub.add_argument("--config", help="JSON experiment configuration")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int, help="master seed override")
        sub.add_argument("--method", action="append",
                         choices=RECOVERY_METHODS,
                         help="recovery method to run (repeatable)")
    inspect = commands.add_parser("inspect",
                                  help="dump a history snapshot manifest")
    inspect.add_argument("path", help="snapshot directory, or an output "
                                      "directory holding history/")
    return parser


def inspect_snapshot(path):
    nested = os.path.join(path, HISTORY_DIR)
    manifest = read_manifest(nested if os.path.isdir(nested) else path)
    print(json.dumps(manifest, indent=2))


def run_stage(args):
    """
    Loads the configuration, applies the command line overrides and runs
    the requested stage inside the managed output directory.
    """
    cfg = load_config(args.config).override(master_seed=args.seed,
                                            output_dir=args.out)
    if args.method:
        cfg = cfg.with_methods(dict.fromkeys(args.method))
    cfg.validate()
    with FolderHandler(cfg.output_dir) as folder:
        runner = ExperimentRunner(cfg, folder)
        getattr(runner, args.command)()
    log_obj.info(f"Stage '{args.command}' finished, artifacts in "
                 f"{cfg.output_dir}")


def main(argv=None):
    """
    The main function to be executed.

    Args:
        argv(list): Arguments without the program name; sys.argv if None.

    Returns:
        int: Exit status, 0 on success, 1 configuration error, 2 artifact
             I/O error, 3 contract violation or unexpected failure.
    """
    args = build_parser().parse_args(argv)
    set_log_level(args.log_level)
    try:
        if args.command == "inspect":
            inspect_snapshot(args.path)
        else:
            run_stage(args)
    except CrabError as crab_error:
        log_obj.error(f"{type(crab_error).__name__}: {crab_error}")
        return crab_error.exit_code
    except Exception as e:
        log_obj.exception(e)
        return UNEXPECTED_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
