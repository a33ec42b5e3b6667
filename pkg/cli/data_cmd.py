import logging
from pathlib import Path

from cli.base_cmd import Command
from core.config_handler import ConfigError
from core.data_handler import default_category_rules, dump_category_rules, synth_generate, write_csv

logger = logging.getLogger(__name__)


def rules_path_for(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(f"{csv_path.stem}.rules.yaml")


class SynthCommand(Command):
    name = "synth"
    help = "generate a labelled synthetic feature table with one informative category"
    uses_config = False
    uses_data = False

    def add_arguments(self, parser):
        parser.add_argument("--n-per-class", type=int, default=300, help="rows per emotion class")
        parser.add_argument("--dims", type=int, default=120, help="feature columns")
        parser.add_argument("--planted", default="covariance",
                            choices=("statistical", "frequency", "covariance", "eigenvalue"),
                            help="category whose columns separate the classes")
        parser.add_argument("--separation", type=float, default=5.0, help="class mean shift on planted columns")
        parser.add_argument("--seed", type=int, help="random seed (required)")
        parser.add_argument("--out", required=True, help="CSV path; category rules go next to it")

    def run(self, args) -> int:
        if args.seed is None:
            raise ConfigError("seed: required for synth (pass --seed)")
        table, categories = synth_generate(args.n_per_class, args.dims, args.planted, args.separation, args.seed)
        write_csv(table, args.out)
        rules_path = rules_path_for(args.out)
        dump_category_rules(default_category_rules(), rules_path)
        logger.info("wrote %s (%d rows x %d features, categories %s) and %s",
                    args.out, table.n_samples, table.n_features, categories.counts(), rules_path)
        return 0
