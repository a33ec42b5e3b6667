import logging

import numpy as np

from cli.base_cmd import Command
from core import config_handler as cfg
from core.data_handler import CLASS_NAMES, stratified_split
from core.experiment_handler import RunReport, fit_and_predict, validation_record
from core.report_handler import confusion_frame, write_frame, write_json
from core.stats_handler import bootstrap_ci, confusion_matrix, metrics, overfitting_level, per_class_table
from core.train_handler import write_trace_csv
from core.utils import digest_arrays, staged_output_dir

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.nafc"


class TrainCommand(Command):
    name = "train"
    help = "train one model on a stratified split and evaluate it on the held-out rows"

    def add_arguments(self, parser):
        parser.add_argument("--model", default="enhanced", choices=cfg.ROSTER, help="model to train")
        parser.add_argument("--out-dir", required=True, help="run directory (replaced on success)")

    def run(self, args) -> int:
        config = self.resolve_config(args)
        seed = config.seed
        table = self.load_table(config)
        split = stratified_split(table.labels, config.data.test_fraction, seed)
        x, y = table.values, table.labels
        y_test = y[split.test_idx]

        with staged_output_dir(args.out_dir) as stage:
            neural = args.model in cfg.NEURAL_MODELS
            outcome = fit_and_predict(args.model, x[split.train_idx], y[split.train_idx], x[split.test_idx],
                                      config, seed, y_test=y_test,
                                      checkpoint_path=stage / CHECKPOINT_NAME if neural else None)
            cm = confusion_matrix(y_test, outcome.y_pred)
            m = metrics(cm)
            gap = outcome.train_acc - m.accuracy if not neural else outcome.trace.best.gap
            training = {
                "model": args.model,
                "summary": m.summary(),
                "metrics": m.to_dict(),
                "per_class": per_class_table(m, CLASS_NAMES).to_dict(orient="records"),
                "confusion": cm.tolist(),
                "ci": list(bootstrap_ci(y_test, outcome.y_pred, config.experiment.bootstrap_resamples,
                                        config.experiment.ci_level, seed)),
                "overfitting_gap": gap,
                "overfitting_level": overfitting_level(gap),
                "split_digest": digest_arrays(split.train_idx, split.test_idx),
            }
            if neural:
                training["validation"] = validation_record(config)
                training["best_epoch"] = outcome.trace.best_epoch
                training["stop_reason"] = outcome.trace.stop_reason
                write_trace_csv(outcome.trace, stage / "trace.csv")
            write_json(stage / "metrics.json", {"accuracy": m.accuracy, **training})
            write_frame(stage / "confusion.csv", confusion_frame(cm, CLASS_NAMES), index=True)
            cfg.dump_config(config, stage / "config.yaml")
            RunReport(config=cfg.config_to_dict(config), seeds={"seed": seed}, training=training,
                      validation=training.get("validation")).write(stage / "report.json")
        logger.info("%s held-out accuracy %.4f (%d rows)", args.model, m.accuracy, int(np.size(y_test)))
        return 0
