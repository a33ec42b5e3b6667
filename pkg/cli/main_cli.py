import argparse
import logging

from cli.base_cmd import PrerequisiteError
from cli.data_cmd import SynthCommand
from cli.study_cmd import AblateCommand, CompareCommand, ExplainCommand, ReportCommand
from cli.train_cmd import TrainCommand
from core.config_handler import ConfigError
from core.data_handler import DataError

logger = logging.getLogger(__name__)

# command registry: every subcommand and the class that implements it
COMMANDS = [
    ("synth", SynthCommand),
    ("train", TrainCommand),
    ("compare", CompareCommand),
    ("ablate", AblateCommand),
    ("explain", ExplainCommand),
    ("report", ReportCommand),
]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuroaffect",
        description="EEG emotion classification: training, model comparison, ablation and interpretability.",
    )
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                        help="logging threshold (default INFO)")
    subparsers = parser.add_subparsers(dest="command_name", metavar="COMMAND", required=True)
    for name, command_class in COMMANDS:
        command = command_class()
        assert command.name == name
        command.register(subparsers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.command.run(args)
    except (ConfigError, DataError, PrerequisiteError) as e:
        logger.error("%s: %s", args.command_name, e)
        return EXIT_USAGE
    except Exception as e:
        logger.error("%s failed: %s", args.command_name, e)
        logger.debug("traceback", exc_info=True)
        return EXIT_FAILURE
