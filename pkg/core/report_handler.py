"""
File writers for study results and the plain-text summary tables.

All writers are deterministic: fixed column order, fixed float format and
sorted JSON keys, so identical runs produce identical bytes.
"""
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from core.importance_handler import shapley_frame
from core.stats_handler import per_class_table
from core.train_handler import write_trace_csv
from core.utils import atomic_write_text

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
ABLATION_COLUMNS = ("Removed Category", "Features Removed", "Result Acc.", "Acc. Drop", "Runs")


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        # JSON has no inf/nan
        return None if np.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def to_json(doc) -> str:
    return json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n"


def write_json(path, doc):
    atomic_write_text(path, to_json(doc))


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_frame(path, frame: pd.DataFrame, index: bool = False):
    atomic_write_text(path, frame.to_csv(index=index, float_format=FLOAT_FORMAT, lineterminator="\n"))


def confusion_frame(cm, class_names) -> pd.DataFrame:
    return pd.DataFrame(np.asarray(cm), index=[f"actual_{c}" for c in class_names],
                        columns=[f"pred_{c}" for c in class_names])


# ====== per-study writers ====== #

def write_comparison(result, out_dir, class_names):
    out_dir = Path(out_dir)
    rows = []
    for name, m in result.models.items():
        summary = m.metrics.summary()
        rows.append({"model": name, **summary, "ci_lower": m.ci[0], "ci_upper": m.ci[1],
                     "overfitting_gap": m.gap, "overfitting_level": m.overfitting_level,
                     "improvement_over_rf": m.improvement_over_rf})
        write_frame(out_dir / f"confusion_{name}.csv", confusion_frame(m.confusion, class_names), index=True)
        write_frame(out_dir / f"per_class_{name}.csv", per_class_table(m.metrics, class_names))
        folds = pd.DataFrame(m.fold_scores)
        folds.insert(0, "fold", np.arange(len(folds)))
        write_frame(out_dir / f"folds_{name}.csv", folds)
        for i, trace in enumerate(m.traces):
            write_trace_csv(trace, out_dir / f"trace_{name}_fold{i}.csv")
    write_frame(out_dir / "metrics.csv", pd.DataFrame(rows))
    write_json(out_dir / "stats.json", {
        "friedman": result.friedman.to_dict(),
        "pairwise_wilcoxon": result.pairwise.to_dict(),
    })


def ablation_frame(rows) -> pd.DataFrame:
    return pd.DataFrame(
        [[r.category, r.n_removed, r.result_accuracy, r.accuracy_drop, r.runs] for r in rows],
        columns=list(ABLATION_COLUMNS),
    )


def write_ablation(rows, out_dir):
    write_frame(Path(out_dir) / "ablation.csv", ablation_frame(rows))


def write_interpretability(result, out_dir):
    out_dir = Path(out_dir)
    write_frame(out_dir / "importance.csv", result.importance.to_frame())
    write_frame(out_dir / "correlation.csv", result.correlation.to_frame(), index=True)
    write_frame(out_dir / "shap.csv", result.shap_table)
    write_frame(out_dir / "shapley_efficiency.csv", shapley_frame(result.shap_reports))
    if result.attention is not None:
        write_frame(out_dir / "attention.csv", pd.DataFrame(result.attention))


# ====== text summary ====== #

def _table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def render_text(doc: dict) -> str:
    """
    Plain-text tables for whatever sections a run report carries.

    :param doc: RunReport.to_dict() output (or several merged)
    """
    blocks = []
    training = doc.get("training")
    if training:
        summary = training["summary"]
        frame = pd.DataFrame([{"Model": training["model"], "Acc": summary["accuracy"],
                               "Prec": summary["precision"], "Rec": summary["recall"], "F1": summary["f1"]}])
        blocks.append("Held-out performance\n" + _table(frame))

    comparison = doc.get("comparison")
    if comparison:
        models = comparison["models"]
        perf = pd.DataFrame([
            {"Model": name, "Acc": m["summary"]["accuracy"], "Prec": m["summary"]["precision"],
             "Rec": m["summary"]["recall"], "F1": m["summary"]["f1"]}
            for name, m in models.items()
        ])
        blocks.append("Model comparison\n" + _table(perf))
        level = int(round(100 * comparison["ci_level"]))
        ci = pd.DataFrame([
            {"Model": name, "Accuracy": m["summary"]["accuracy"], f"{level}% CI lower": m["ci"][0],
             f"{level}% CI upper": m["ci"][1], "Gap": m["overfitting_gap"], "Overfitting": m["overfitting_level"]}
            for name, m in models.items()
        ])
        blocks.append("Confidence intervals\n" + _table(ci))
        fr = comparison["friedman"]
        lines = [f"Friedman: chi2={_num(fr['statistic'])} p={_num(fr['p_value'])} {fr['note']}".rstrip()]
        for pair in comparison["pairwise_wilcoxon"]["pairs"]:
            lines.append(f"Wilcoxon {pair['a']} vs {pair['b']}: W={_num(pair['statistic'])} "
                         f"p={_num(pair['p_value'])} p_bonferroni={_num(pair['p_adjusted'])}")
        blocks.append("Significance\n" + "\n".join(lines))

    ablation = doc.get("ablation")
    if ablation:
        frame = pd.DataFrame([
            {"Removed Category": r["category"], "Result Acc.": r["result_accuracy"], "Acc. Drop": r["accuracy_drop"]}
            for r in ablation
        ])
        blocks.append("Feature-category ablation\n" + _table(frame))

    interp = doc.get("interpretability")
    if interp:
        top = pd.DataFrame(interp["top_features"])
        keep = [c for c in ("rank", "feature", "consensus") if c in top.columns]
        blocks.append("Top features by consensus\n" + _table(top[keep]))
        shap = pd.DataFrame(interp["shap_top"])
        blocks.append(f"Shapley ({interp['explained_model']}, {interp['shap_samples']} samples)\n" + _table(shap))

    validation = doc.get("validation")
    if validation and validation["mode"] == "holdout":
        blocks.append("Validation\n" + validation["note"])
    return "\n\n".join(blocks) + "\n"


def _num(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, str):
        return value
    return f"{value:.4g}"


def merge_reports(docs) -> dict:
    """Later reports fill sections earlier ones lack."""
    merged = {}
    for doc in docs:
        for key, value in doc.items():
            merged.setdefault(key, value)
    return merged
