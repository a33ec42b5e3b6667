"""Shared plumbing for the batch commands: config resolution and dataset loading."""
import logging
from pathlib import Path

import yaml

from core import config_handler as cfg
from core.data_handler import DEFAULT_RULES, categorize_features, load_category_rules, load_csv, rules_from_records
from core.utils import resolve_data_path

logger = logging.getLogger(__name__)


class PrerequisiteError(FileNotFoundError):
    """A file an earlier command should have produced is missing."""


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise cfg.ConfigError(f"--set expects KEY=VALUE, got '{text}'")
    return key.strip(), yaml.safe_load(raw)


class Command:
    """
    One CLI subcommand. Subclasses set `name`/`help` and implement
    add_arguments() and run(args) -> exit code.
    """
    name = ""
    help = ""
    uses_config = True
    uses_data = True

    def register(self, subparsers):
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help)
        if self.uses_config:
            parser.add_argument("--config", help="YAML config file")
            parser.add_argument("--seed", type=int, help="random seed (required here or in the config)")
            parser.add_argument("--fast", action="store_true", help="desk-scale profile: shrunken model, fewer epochs")
            parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                                help="override a config entry by dotted key, e.g. train.epochs=20")
        if self.uses_data:
            parser.add_argument("--data", help="feature CSV (defaults to data.path from the config)")
        self.add_arguments(parser)
        parser.set_defaults(command=self)
        return parser

    def add_arguments(self, parser):
        pass

    def run(self, args) -> int:
        raise NotImplementedError

    # ====== helpers ====== #

    def flag_overrides(self, args) -> dict:
        """Command-specific flags mapped onto dotted config keys."""
        return {}

    def resolve_config(self, args) -> cfg.CliConfig:
        overrides = dict(parse_override(s) for s in args.overrides)
        overrides.update(self.flag_overrides(args))
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "data", None):
            overrides["data.path"] = args.data
        config = cfg.load_config(args.config, overrides, fast=args.fast)
        ok, msg = cfg.is_valid_config(config)
        if not ok:
            raise cfg.ConfigError(msg)
        cfg.require_seed(config)
        return config

    @staticmethod
    def load_table(config):
        if not config.data.path:
            raise cfg.ConfigError("data.path: required (pass --data or set it in the config)")
        return load_csv(resolve_data_path(config.data.path), config.data.label_column)

    @staticmethod
    def category_map(config, table):
        c = config.categories
        if c.rules is not None:
            rules = rules_from_records(c.rules)
        elif c.rules_file:
            rules = load_category_rules(resolve_data_path(c.rules_file))
        else:
            rules = DEFAULT_RULES
        return categorize_features(table.feature_names, rules, c.default)

    @staticmethod
    def require_file(path, produced_by: str) -> Path:
        path = Path(path)
        if not path.is_file():
            raise PrerequisiteError(f"missing {path} (produced by `{produced_by}`)")
        return path
