import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from core.config_handler import load_config
from core.data_handler import CLASS_NAMES, stratified_split, synth_generate
from core.experiment_handler import (ExperimentError, RunReport, fit_and_predict, run_ablation, run_comparison,
                                     run_interpretability, validation_record)
from core.report_handler import (ABLATION_COLUMNS, ablation_frame, merge_reports, read_json, render_text, to_json,
                                 write_ablation, write_comparison, write_interpretability)
from tests.conftest import TINY_OVERRIDES


def tiny(**extra):
    return load_config(overrides={**TINY_OVERRIDES, "seed": 3, **extra})


class TestFitAndPredict:
    def test_forest_outcome(self, small_synth):
        table, _ = small_synth
        split = stratified_split(table.labels, 0.2, 0)
        x, y = table.values, table.labels
        outcome = fit_and_predict("rf", x[split.train_idx], y[split.train_idx], x[split.test_idx], tiny(), 0,
                                  y_test=y[split.test_idx])
        assert outcome.y_pred.shape == split.test_idx.shape
        assert outcome.trace is None
        assert 0.0 <= outcome.val_acc <= 1.0

    def test_neural_outcome_and_checkpoint(self, small_synth, tmp_path):
        table, _ = small_synth
        split = stratified_split(table.labels, 0.2, 0)
        x, y = table.values, table.labels
        outcome = fit_and_predict("mlp", x[split.train_idx], y[split.train_idx], x[split.test_idx], tiny(), 0,
                                  y_test=y[split.test_idx], checkpoint_path=tmp_path / "m.nafc")
        assert len(outcome.trace.epochs) == 3
        assert outcome.val_acc == outcome.trace.best.val_acc
        assert (tmp_path / "m.nafc").is_file()

    def test_unknown_model(self, small_synth):
        table, _ = small_synth
        with pytest.raises(ExperimentError, match="unknown model 'svm'"):
            fit_and_predict("svm", table.values, table.labels, table.values, tiny(), 0)


class TestComparison:
    def test_forests(self, small_synth, tmp_path):
        table, _ = small_synth
        result = run_comparison(table, tiny(**{"experiment.roster": ["rf", "et"]}), seed=3)
        assert list(result.models) == ["rf", "et"]
        for m in result.models.values():
            assert len(m.fold_scores["accuracy"]) == 3
            assert m.confusion.sum() == table.n_samples
            assert m.ci[0] <= m.metrics.accuracy <= m.ci[1]
            assert m.metrics.accuracy >= 0.8
        assert result.models["rf"].improvement_over_rf == 0.0
        assert 0.0 <= result.friedman.p_value <= 1.0
        assert len(result.pairwise.pairs) == 1
        assert len(result.split_digests) == 3

        write_comparison(result, tmp_path, CLASS_NAMES)
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert list(frame["model"]) == ["rf", "et"]
        assert (tmp_path / "confusion_et.csv").is_file()
        assert "friedman" in json.loads((tmp_path / "stats.json").read_text())

    def test_single_model_skips_friedman(self, small_synth):
        table, _ = small_synth
        result = run_comparison(table, tiny(**{"experiment.roster": ["rf"]}), seed=3)
        assert result.friedman.note == "insufficient methods"
        assert result.pairwise.note == "insufficient methods"

    def test_deterministic(self, small_synth):
        table, _ = small_synth
        config = tiny(**{"experiment.roster": ["rf", "et"]})
        assert to_json(run_comparison(table, config, 5).to_dict()) == to_json(run_comparison(table, config, 5).to_dict())

    @pytest.mark.slow
    def test_full_roster(self, small_synth):
        table, _ = small_synth
        result = run_comparison(table, tiny(), seed=3)
        assert list(result.models) == ["rf", "et", "mlp", "standard", "enhanced"]
        assert len(result.models["enhanced"].traces) == 3
        assert np.isfinite(result.friedman.statistic)
        assert len(result.pairwise.pairs) == 10
        text = render_text(RunReport(config={}, seeds={}, comparison=result.to_dict()).to_dict())
        assert "Model comparison" in text
        assert "Wilcoxon standard vs enhanced" in text


class TestAblation:
    def test_planted_category_has_largest_drop(self, small_synth, tmp_path):
        table, categories = small_synth
        rows = run_ablation(table, categories, tiny(), seed=3, kind="rf", runs=2)
        assert [r.category for r in rows] == categories.present()
        worst = max(rows, key=lambda r: r.accuracy_drop)
        assert worst.category == "covariance"
        assert all(r.runs == 2 for r in rows)
        assert len({r.full_accuracy for r in rows}) == 1

        write_ablation(rows, tmp_path)
        frame = pd.read_csv(tmp_path / "ablation.csv")
        assert tuple(frame.columns) == ABLATION_COLUMNS
        assert_allclose(frame["Acc. Drop"], [r.accuracy_drop for r in rows])

    def test_needs_two_categories(self, small_synth):
        table, categories = small_synth
        single = replace(categories, assignment=("statistical",) * table.n_features)
        with pytest.raises(ExperimentError, match="at least 2 feature categories"):
            run_ablation(table, single, tiny(), seed=3, kind="rf")

    def test_frame_from_rows(self, small_synth):
        table, categories = small_synth
        rows = run_ablation(table, categories, tiny(), seed=1, kind="et", runs=1)
        frame = ablation_frame(rows)
        assert list(frame["Features Removed"]) == [int(categories.indices_of(c).size) for c in categories.present()]


class TestInterpretability:
    def test_forest_explanation(self, small_synth, tmp_path):
        table, _ = small_synth
        result = run_interpretability(table, tiny(), seed=3)
        assert len(result.importance.ranking) == table.n_features
        assert len(result.shap_reports) == 3
        for report in result.shap_reports:
            assert abs(report.efficiency_residual) < 1e-9
        assert result.correlation.matrix.shape == (7, 7)
        assert result.attention is None
        top = table.feature_names[result.importance.ranking[0]]
        assert top.startswith("covmat")

        write_interpretability(result, tmp_path)
        assert len(pd.read_csv(tmp_path / "importance.csv")) == table.n_features
        assert not (tmp_path / "attention.csv").exists()

    def test_enhanced_needs_a_model(self, small_synth):
        table, _ = small_synth
        with pytest.raises(ExperimentError, match="trained checkpoint"):
            run_interpretability(table, tiny(**{"importance.explain_model": "enhanced"}), seed=3)

    @pytest.mark.slow
    def test_enhanced_explanation_with_attention(self, small_synth):
        table, _ = small_synth
        config = tiny(**{"importance.explain_model": "enhanced"})
        split = stratified_split(table.labels, config.data.test_fraction, 3)
        x, y = table.values, table.labels
        outcome = fit_and_predict("enhanced", x[split.train_idx], y[split.train_idx], x[split.test_idx], config, 3,
                                  y_test=y[split.test_idx])
        result = run_interpretability(table, config, seed=3, enhanced=outcome.model, split=split)
        assert result.explained_model == "enhanced"
        assert result.attention.shape == (3, 3)
        assert_allclose(result.attention.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.slow
class TestFastProfileEndToEnd:
    def test_models_reach_target_accuracy(self):
        """3 x 300 rows, 120 features, covariance planted at separation 5."""
        table, _ = synth_generate(300, 120, "covariance", 5.0, seed=1)
        config = load_config(fast=True, overrides={"seed": 1})
        split = stratified_split(table.labels, config.data.test_fraction, 1)
        x, y = table.values, table.labels
        outcomes = {
            kind: fit_and_predict(kind, x[split.train_idx], y[split.train_idx], x[split.test_idx], config, 1,
                                  y_test=y[split.test_idx])
            for kind in ("rf", "mlp", "enhanced")
        }
        assert outcomes["enhanced"].val_acc >= 0.95
        assert len(outcomes["enhanced"].trace.epochs) <= 50
        assert outcomes["rf"].val_acc >= 0.90
        assert outcomes["mlp"].val_acc >= 0.90

    def test_ablation_with_default_model(self):
        """Three seeded runs of the enhanced model; the other categories are pure noise."""
        table, categories = synth_generate(200, 60, "covariance", 5.0, seed=2)
        config = load_config(fast=True, overrides={"seed": 2, "experiment.n_jobs": -1})
        assert config.experiment.ablation_model == "enhanced"
        assert config.experiment.ablation_runs == 3
        rows = run_ablation(table, categories, config, seed=2)
        assert all(r.runs == 3 for r in rows)
        assert max(rows, key=lambda r: r.accuracy_drop).category == "covariance"
        for row in rows:
            if row.category != "covariance":
                assert abs(row.accuracy_drop) < 0.03, row.category


class TestRunReport:
    def test_round_trip_through_json(self, small_synth, tmp_path):
        table, categories = small_synth
        rows = run_ablation(table, categories, tiny(), seed=3, kind="rf", runs=1)
        report = RunReport(config={"seed": 3}, seeds={"seed": 3}, ablation=[r.to_dict() for r in rows])
        report.write(tmp_path / "report.json")
        again = RunReport.from_dict(read_json(tmp_path / "report.json"))
        assert again.ablation == json.loads(to_json(report.to_dict()))["ablation"]
        assert "Feature-category ablation" in render_text(again.to_dict())

    def test_validation_record_surfaces_holdout_selection(self):
        record = validation_record(tiny())
        assert record["mode"] == "holdout"
        report = RunReport(config={}, seeds={}, validation=record)
        again = RunReport.from_dict(json.loads(to_json(report.to_dict())))
        assert again.validation == record
        assert "not untouched test scores" in render_text(again.to_dict())

    def test_inner_validation_has_no_warning(self):
        record = validation_record(tiny(**{"train.validation": "inner"}))
        assert record["mode"] == "inner"
        assert "Validation" not in render_text({"validation": record})

    def test_schema_version_checked(self):
        with pytest.raises(ExperimentError, match="schema_version 7"):
            RunReport.from_dict({"schema_version": 7, "config": {}, "seeds": {}})

    def test_merge_keeps_first_section(self):
        merged = merge_reports([{"a": 1, "seeds": {"seed": 1}}, {"a": 2, "b": 3}])
        assert merged == {"a": 1, "b": 3, "seeds": {"seed": 1}}
