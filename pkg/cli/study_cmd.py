import logging
from pathlib import Path

from cli.base_cmd import Command, PrerequisiteError
from core import checkpoint_handler
from core import config_handler as cfg
from core.data_handler import CLASS_NAMES, stratified_split
from core.experiment_handler import RunReport, run_ablation, run_comparison, run_interpretability, validation_record
from core.report_handler import (merge_reports, read_json, render_text, write_ablation, write_comparison,
                                 write_frame, write_interpretability, write_json)
from core.train_handler import TrainResult, TrainTrace
from core.utils import atomic_write_text, staged_output_dir

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"


def base_report(config, models=()) -> RunReport:
    report = RunReport(config=cfg.config_to_dict(config), seeds={"seed": config.seed})
    if any(m in cfg.NEURAL_MODELS for m in models):
        report.validation = validation_record(config)
    return report


class CompareCommand(Command):
    name = "compare"
    help = "cross-validate the model roster on identical folds with significance tests"

    def add_arguments(self, parser):
        parser.add_argument("--roster", help="comma-separated subset of " + ",".join(cfg.ROSTER))
        parser.add_argument("--folds", type=int, help="number of stratified folds")
        parser.add_argument("--out-dir", required=True, help="run directory (replaced on success)")

    def flag_overrides(self, args) -> dict:
        overrides = {"experiment.folds": args.folds}
        if args.roster:
            overrides["experiment.roster"] = [m.strip() for m in args.roster.split(",") if m.strip()]
        return overrides

    def run(self, args) -> int:
        config = self.resolve_config(args)
        table = self.load_table(config)
        result = run_comparison(table, config, config.seed)
        with staged_output_dir(args.out_dir) as stage:
            write_comparison(result, stage, CLASS_NAMES)
            report = base_report(config, result.models)
            report.seeds["fold_seeds"] = result.fold_seeds
            report.comparison = result.to_dict()
            report.write(stage / REPORT_NAME)
        return 0


class AblateCommand(Command):
    name = "ablate"
    help = "retrain without each feature category and report the accuracy drop"

    def add_arguments(self, parser):
        parser.add_argument("--model", choices=cfg.ROSTER, help="model retrained per category")
        parser.add_argument("--runs", type=int, help="repeated splits averaged per category")
        parser.add_argument("--out-dir", required=True, help="run directory (replaced on success)")

    def flag_overrides(self, args) -> dict:
        return {"experiment.ablation_model": args.model, "experiment.ablation_runs": args.runs}

    def run(self, args) -> int:
        config = self.resolve_config(args)
        table = self.load_table(config)
        rows = run_ablation(table, self.category_map(config, table), config, config.seed)
        with staged_output_dir(args.out_dir) as stage:
            write_ablation(rows, stage)
            report = base_report(config, [config.experiment.ablation_model])
            report.ablation = [r.to_dict() for r in rows]
            report.write(stage / REPORT_NAME)
        return 0


class ExplainCommand(Command):
    name = "explain"
    help = "consensus feature importance, Shapley attributions and feature correlations"

    def add_arguments(self, parser):
        parser.add_argument("--top-k", type=int, help="rows in top_features.csv")
        parser.add_argument("--explain-model", choices=cfg.EXPLAIN_MODELS, help="model whose predictions are attributed")
        parser.add_argument("--checkpoint", help="enhanced-model checkpoint written by `train`")
        parser.add_argument("--out-dir", required=True, help="run directory (replaced on success)")

    def flag_overrides(self, args) -> dict:
        return {"importance.top_k": args.top_k, "importance.explain_model": args.explain_model}

    def load_enhanced(self, path):
        model, normalizer = checkpoint_handler.load(self.require_file(path, "train --model enhanced"))
        if normalizer is None:
            raise PrerequisiteError(f"{path}: checkpoint carries no normalizer")
        return TrainResult(model=model, normalizer=normalizer, trace=TrainTrace())

    def run(self, args) -> int:
        config = self.resolve_config(args)
        if config.importance.explain_model == "enhanced" and not args.checkpoint:
            raise PrerequisiteError("explaining the enhanced model needs --checkpoint from `train --model enhanced`")
        table = self.load_table(config)
        enhanced = self.load_enhanced(args.checkpoint) if args.checkpoint else None
        split = stratified_split(table.labels, config.data.test_fraction, config.seed)
        result = run_interpretability(table, config, config.seed, enhanced=enhanced, split=split)
        with staged_output_dir(args.out_dir) as stage:
            write_interpretability(result, stage)
            write_frame(stage / "top_features.csv", result.importance.top(config.importance.top_k))
            report = base_report(config)
            report.interpretability = result.to_dict(config.importance.top_k)
            report.write(stage / REPORT_NAME)
        return 0


class ReportCommand(Command):
    name = "report"
    help = "render the reports of earlier runs as plain-text tables and one merged JSON"
    uses_config = False
    uses_data = False

    def add_arguments(self, parser):
        parser.add_argument("--run-dir", action="append", required=True,
                            help="directory holding a report.json (repeatable)")
        parser.add_argument("--out-dir", required=True, help="where summary.txt and summary.json go")

    def run(self, args) -> int:
        docs = []
        for run_dir in args.run_dir:
            path = self.require_file(Path(run_dir) / REPORT_NAME, "train/compare/ablate/explain")
            docs.append(RunReport.from_dict(read_json(path)).to_dict())
        merged = merge_reports(docs)
        text = render_text(merged)
        with staged_output_dir(args.out_dir) as stage:
            atomic_write_text(stage / "summary.txt", text)
            write_json(stage / "summary.json", merged)
        print(text, end="")
        return 0
