"""
Study orchestration: cross-validated model comparison, feature-category
ablation and the interpretability bundle. Each study returns a plain result
object; core.report_handler turns them into files.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from core import config_handler as cfg
from core.data_handler import CategoryMap, FeatureTable, apply_normalizer, kfold, stratified_split
from core.forest_handler import extra_trees, impurity_importance, random_forest
from core.importance_handler import (correlation_matrix, explain_samples, score_features, shap_summary,
                                     shapley_frame)
from core.model_handler import make_classifier, standard_spec
from core.stats_handler import (bootstrap_ci, confusion_matrix, friedman, metrics, overfitting_gap,
                                overfitting_level, pairwise_wilcoxon, per_class_table, StatTestResult)
from core.train_handler import inner_validation_split, mlp_baseline_spec, train
from core.report_handler import write_json
from core.utils import derive_seeds, digest_arrays

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FOLD_METRICS = ("accuracy", "precision", "recall", "f1")
VALIDATION_NOTES = {
    "holdout": "neural models pick their best epoch and stop early on the evaluated rows; "
               "their scores are not untouched test scores",
    "inner": "neural models pick their best epoch on an inner split of the training rows",
}


class ExperimentError(RuntimeError):
    pass


# ====== single fit ====== #

def validation_record(config) -> dict:
    """Where neural models were validated, for the run report."""
    mode = config.train.validation
    return {"mode": mode, "note": VALIDATION_NOTES[mode]}


@dataclass
class FitOutcome:
    kind: str
    y_pred: np.ndarray
    train_acc: float
    val_acc: float
    trace: object = None
    model: object = None


def neural_spec(kind: str, config, input_dim: int):
    if kind == "mlp":
        return mlp_baseline_spec(input_dim)
    enhanced = cfg.model_spec(config, input_dim)
    return standard_spec(enhanced) if kind == "standard" else enhanced


def fit_and_predict(kind: str, x_train, y_train, x_test, config, seed: int, y_test=None,
                    checkpoint_path=None) -> FitOutcome:
    """
    Fit one roster model on (x_train, y_train) and predict x_test.

    Neural models validate on the held-out rows (y_test) unless the config
    asks for an inner split of the training rows.
    """
    if kind in ("rf", "et"):
        factory = random_forest if kind == "rf" else extra_trees
        forest = factory(n_trees=config.forest.n_trees, seed=seed, **cfg.forest_kwargs(config))
        forest.fit(x_train, y_train, n_classes=3)
        train_acc = float(np.mean(forest.predict(x_train) == y_train))
        y_pred = forest.predict(x_test)
        val_acc = float(np.mean(y_pred == y_test)) if y_test is not None else float("nan")
        return FitOutcome(kind, y_pred, train_acc, val_acc, model=forest)

    if kind not in cfg.NEURAL_MODELS:
        raise ExperimentError(f"unknown model '{kind}'")
    spec = neural_spec(kind, config, x_train.shape[1])
    tspec = cfg.train_spec(config, seed)
    model = make_classifier(kind, spec, seed)
    if tspec.validation == "inner" or y_test is None:
        fit_x, fit_y, val_x, val_y = inner_validation_split(x_train, y_train, tspec)
    else:
        fit_x, fit_y, val_x, val_y = x_train, y_train, x_test, y_test
    result = train(model, fit_x, fit_y, val_x, val_y, tspec, checkpoint_path=checkpoint_path)
    best = result.trace.best
    return FitOutcome(kind, result.predict(x_test), best.train_acc, best.val_acc, trace=result.trace, model=result)


# ====== comparison ====== #

@dataclass
class ModelComparison:
    name: str
    fold_scores: dict
    y_pred: np.ndarray
    confusion: np.ndarray
    metrics: object
    ci: tuple
    gap: float
    traces: list = field(default_factory=list, repr=False)
    improvement_over_rf: float = None

    @property
    def overfitting_level(self) -> str:
        return overfitting_level(self.gap)

    def to_dict(self) -> dict:
        return {
            "summary": self.metrics.summary(),
            "fold_scores": self.fold_scores,
            "per_class": per_class_table(self.metrics).to_dict(orient="records"),
            "metrics": self.metrics.to_dict(),
            "confusion": self.confusion.tolist(),
            "ci": list(self.ci),
            "overfitting_gap": self.gap,
            "overfitting_level": self.overfitting_level,
            "improvement_over_rf": self.improvement_over_rf,
            "best_epochs": [t.best_epoch for t in self.traces],
        }


@dataclass
class ComparisonResult:
    models: dict
    friedman: object
    pairwise: object
    split_digests: list
    fold_seeds: list
    ci_level: float
    labels: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "models": {name: m.to_dict() for name, m in self.models.items()},
            "friedman": self.friedman.to_dict(),
            "pairwise_wilcoxon": self.pairwise.to_dict(),
            "split_digests": self.split_digests,
            "fold_seeds": self.fold_seeds,
            "ci_level": self.ci_level,
        }


def _fold_job(kind, fold_no, table, split, config, seed):
    x, y = table.values, table.labels
    try:
        outcome = fit_and_predict(kind, x[split.train_idx], y[split.train_idx], x[split.test_idx], config, seed,
                                  y_test=y[split.test_idx])
    except Exception as e:
        raise ExperimentError(f"model '{kind}' failed on fold {fold_no}: {e}") from e
    logger.info("fold %d %s: accuracy %.4f", fold_no, kind, outcome.val_acc)
    # drop fitted models; only predictions and traces travel back
    outcome.model = None
    return outcome


def run_comparison(table: FeatureTable, config, seed: int) -> ComparisonResult:
    """Train every roster model on identical stratified folds and compare them."""
    roster = list(config.experiment.roster)
    folds = kfold(table.labels, config.experiment.folds, seed)
    fold_seeds = derive_seeds(seed, len(folds))
    digests = [digest_arrays(s.train_idx, s.test_idx) for s in folds]
    logger.info("comparing %s over %d folds", ", ".join(roster), len(folds))

    jobs = [(kind, i) for kind in roster for i in range(len(folds))]
    outcomes = Parallel(n_jobs=config.experiment.n_jobs)(
        delayed(_fold_job)(kind, i, table, folds[i], config, fold_seeds[i]) for kind, i in jobs
    )
    by_job = dict(zip(jobs, outcomes))

    y = table.labels
    models = {}
    for kind in roster:
        y_pred = np.empty_like(y)
        fold_scores = {k: [] for k in FOLD_METRICS}
        gaps = []
        traces = []
        for i, split in enumerate(folds):
            outcome = by_job[(kind, i)]
            y_pred[split.test_idx] = outcome.y_pred
            m = metrics(confusion_matrix(y[split.test_idx], outcome.y_pred))
            for key, value in m.summary().items():
                fold_scores[key].append(value)
            gaps.append(overfitting_gap(outcome.train_acc, m.accuracy if outcome.trace is None else outcome.val_acc))
            if outcome.trace is not None:
                traces.append(outcome.trace)
        cm = confusion_matrix(y, y_pred)
        models[kind] = ModelComparison(
            name=kind,
            fold_scores=fold_scores,
            y_pred=y_pred,
            confusion=cm,
            metrics=metrics(cm),
            ci=bootstrap_ci(y, y_pred, config.experiment.bootstrap_resamples, config.experiment.ci_level, seed),
            gap=float(np.mean(gaps)),
            traces=traces,
        )

    if "rf" in models:
        base = models["rf"].metrics.accuracy
        for m in models.values():
            m.improvement_over_rf = m.metrics.accuracy - base

    accuracy_table = {name: m.fold_scores["accuracy"] for name, m in models.items()}
    if len(models) >= 2:
        omnibus = friedman(np.array(list(accuracy_table.values())))
    else:
        omnibus = StatTestResult(method="friedman", statistic=float("nan"), p_value=1.0, note="insufficient methods")
    return ComparisonResult(
        models=models,
        friedman=omnibus,
        pairwise=pairwise_wilcoxon(accuracy_table),
        split_digests=digests,
        fold_seeds=fold_seeds,
        ci_level=config.experiment.ci_level,
        labels=y,
    )


# ====== ablation ====== #

@dataclass
class AblationRow:
    category: str
    n_removed: int
    full_accuracy: float
    result_accuracy: float
    accuracy_drop: float
    runs: int

    @classmethod
    def from_accuracies(cls, category: str, n_removed: int, full_accuracies, result_accuracies) -> "AblationRow":
        full = float(np.mean(full_accuracies))
        result = float(np.mean(result_accuracies))
        return cls(category=category, n_removed=n_removed, full_accuracy=full, result_accuracy=result,
                   accuracy_drop=full - result, runs=len(result_accuracies))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ablation_job(kind, table, keep, split, config, seed):
    x = table.values[:, keep]
    y = table.labels
    outcome = fit_and_predict(kind, x[split.train_idx], y[split.train_idx], x[split.test_idx], config, seed,
                              y_test=y[split.test_idx])
    return float(np.mean(outcome.y_pred == y[split.test_idx]))


def run_ablation(table: FeatureTable, categories: CategoryMap, config, seed: int, kind: str = None,
                 runs: int = None) -> list:
    """
    Retrain from scratch without each feature category in turn.

    :return: one AblationRow per category present, in category order
    """
    kind = kind or config.experiment.ablation_model
    runs = runs or config.experiment.ablation_runs
    present = categories.present()
    if len(present) < 2:
        raise ExperimentError(f"ablation needs at least 2 feature categories, found {present}")
    all_idx = np.arange(table.n_features)
    keeps = {"__full__": all_idx}
    for category in present:
        keep = np.setdiff1d(all_idx, categories.indices_of(category))
        if keep.size == 0:
            raise ExperimentError(f"removing '{category}' leaves no features")
        keeps[category] = keep

    run_seeds = derive_seeds(seed, runs)
    splits = [stratified_split(table.labels, config.data.test_fraction, s) for s in run_seeds]
    jobs = [(name, r) for name in keeps for r in range(runs)]
    logger.info("ablation of %s with %s, %d run(s) each", ", ".join(present), kind, runs)
    try:
        accuracies = Parallel(n_jobs=config.experiment.n_jobs)(
            delayed(_ablation_job)(kind, table, keeps[name], splits[r], config, run_seeds[r]) for name, r in jobs
        )
    except Exception as e:
        raise ExperimentError(f"ablation run failed: {e}") from e
    scores = {}
    for (name, _), acc in zip(jobs, accuracies):
        scores.setdefault(name, []).append(acc)

    rows = []
    for category in present:
        row = AblationRow.from_accuracies(category, int(categories.indices_of(category).size),
                                          scores["__full__"], scores[category])
        logger.info("without %s: %.4f (drop %.4f)", category, row.result_accuracy, row.accuracy_drop)
        rows.append(row)
    return rows


# ====== interpretability ====== #

@dataclass
class InterpretabilityResult:
    importance: object
    shap_reports: list
    shap_table: object
    correlation: object
    explained_model: str
    sample_indices: np.ndarray
    attention: np.ndarray = None

    def to_dict(self, top_k: int = 15) -> dict:
        frame = shapley_frame(self.shap_reports)
        return {
            "explained_model": self.explained_model,
            "top_features": self.importance.top(top_k).to_dict(orient="records"),
            "shap_top": self.shap_table.to_dict(orient="records"),
            "shap_samples": int(len(self.shap_reports)),
            "max_abs_efficiency_residual": float(frame["efficiency_residual"].abs().max()),
            "correlation_features": list(self.correlation.names),
            "sample_indices_digest": digest_arrays(self.sample_indices),
        }


def mean_attention(result, rows) -> np.ndarray:
    """Stage-2 attention of a trained hybrid averaged over heads and rows."""
    weights = result.model.attention_maps(apply_normalizer(result.normalizer, rows))["attn2"]
    return weights.mean(axis=(0, 1))


def run_interpretability(table: FeatureTable, config, seed: int, rf=None, et=None, enhanced=None,
                         split=None) -> InterpretabilityResult:
    """
    Consensus importance over the training rows, Shapley attributions for a
    seeded subset of held-out rows, and the top-k correlation matrix.

    :param rf: fitted Random Forest (fitted here on the training rows if None)
    :param enhanced: TrainResult of the enhanced model, needed when it is the explained model
    """
    imp = config.importance
    split = split or stratified_split(table.labels, config.data.test_fraction, seed)
    x, y = table.values, table.labels
    x_train, y_train = x[split.train_idx], y[split.train_idx]
    forest_seed, et_seed, shap_seed = derive_seeds(seed, 3)
    if rf is None:
        rf = random_forest(config.forest.n_trees, forest_seed, **cfg.forest_kwargs(config)).fit(x_train, y_train, 3)
    if et is None:
        et = extra_trees(config.forest.n_trees, et_seed, **cfg.forest_kwargs(config)).fit(x_train, y_train, 3)
    rf_importance = impurity_importance(rf)
    importance = score_features(x_train, y_train, table.feature_names, rf_importance, impurity_importance(et),
                                imp.mi_bins)

    if imp.explain_model == "enhanced":
        if enhanced is None:
            raise ExperimentError("explaining the enhanced model needs a trained checkpoint")
        predictor = enhanced.predict_proba
    else:
        predictor = (rf if imp.explain_model == "rf" else et).predict_proba
    n_explain = min(imp.shap_samples, split.test_idx.size)
    rng = np.random.default_rng(shap_seed)
    sample_idx = np.sort(rng.choice(split.test_idx, size=n_explain, replace=False))
    logger.info("Shapley for %d sample(s) of %s, %d permutation(s) each",
                n_explain, imp.explain_model, imp.shap_permutations)
    reports = explain_samples(predictor, x[sample_idx], x_train, imp.shap_permutations, shap_seed)

    attention = mean_attention(enhanced, x[sample_idx]) if enhanced is not None else None
    return InterpretabilityResult(
        importance=importance,
        shap_reports=reports,
        shap_table=shap_summary(reports, rf_importance, table.feature_names, imp.shap_top),
        correlation=correlation_matrix(x, y, table.feature_names, min(imp.correlation_top_k, table.n_features)),
        explained_model=imp.explain_model,
        sample_indices=sample_idx,
        attention=attention,
    )


# ====== report ====== #

@dataclass
class RunReport:
    config: dict
    seeds: dict
    comparison: dict = None
    ablation: list = None
    interpretability: dict = None
    training: dict = None
    validation: dict = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        doc = {"schema_version": self.schema_version, "config": self.config, "seeds": self.seeds}
        for key in ("validation", "training", "comparison", "ablation", "interpretability"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ExperimentError(f"unsupported report schema_version {version}")
        return cls(config=doc["config"], seeds=doc["seeds"], comparison=doc.get("comparison"),
                   ablation=doc.get("ablation"), interpretability=doc.get("interpretability"),
                   training=doc.get("training"), validation=doc.get("validation"))

    def write(self, path):
        write_json(path, self.to_dict())
