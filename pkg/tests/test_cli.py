import json

import numpy as np
import pandas as pd
import pytest
import yaml

from cli.data_cmd import rules_path_for
from cli.main_cli import COMMANDS, build_parser, main
from core.config_handler import dotted_to_nested, load_config
from core.data_handler import load_csv, stratified_split
from core.experiment_handler import fit_and_predict
from core.forest_handler import random_forest
from core.utils import resolve_data_path
from tests.conftest import TINY_OVERRIDES


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic CSV plus a tiny-model config file shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    csv = root / "synth.csv"
    assert main(["synth", "--n-per-class", "30", "--dims", "24", "--seed", "7", "--out", str(csv)]) == 0
    config = root / "tiny.yaml"
    config.write_text(yaml.safe_dump({**dotted_to_nested(TINY_OVERRIDES), "seed": 3, "data": {"path": str(csv)}}))
    return root, csv, config


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestParser:
    def test_registry(self):
        assert [name for name, _ in COMMANDS] == ["synth", "train", "compare", "ablate", "explain", "report"]

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train", "--out-dir", "x", "--bogus"])
        assert exc.value.code == 2

    def test_command_required(self):
        with pytest.raises(SystemExit):
            main([])


class TestSynth:
    def test_default_table_shape(self, tmp_path):
        out = tmp_path / "emotions.csv"
        assert main(["synth", "--seed", "1", "--out", str(out)]) == 0
        table = load_csv(out)
        assert table.values.shape == (900, 120)
        assert np.bincount(table.labels).tolist() == [300, 300, 300]
        assert rules_path_for(out).is_file()

    def test_seed_required(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x.csv")]) == 2
        assert not (tmp_path / "x.csv").exists()


class TestTrain:
    def test_forest_run_directory(self, workspace):
        root, csv, config = workspace
        out = root / "train_rf"
        assert main(["train", "--config", str(config), "--model", "rf", "--out-dir", str(out)]) == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert 0.7 <= doc["accuracy"] <= 1.0
        assert doc["model"] == "rf"
        assert (out / "confusion.csv").is_file()
        assert not (out / "trace.csv").exists()
        assert yaml.safe_load((out / "config.yaml").read_text())["seed"] == 3
        assert "validation" not in json.loads((out / "report.json").read_text())

    def test_accuracy_matches_library(self, workspace):
        """The command reports exactly what the library computes for the same seed and split."""
        root, csv, config = workspace
        out = root / "train_rf_check"
        assert main(["train", "--config", str(config), "--model", "rf", "--out-dir", str(out)]) == 0
        table = load_csv(csv)
        split = stratified_split(table.labels, 0.2, 3)
        x, y = table.values, table.labels
        outcome = fit_and_predict("rf", x[split.train_idx], y[split.train_idx], x[split.test_idx],
                                  load_config(config), 3, y_test=y[split.test_idx])
        assert json.loads((out / "metrics.json").read_text())["accuracy"] == outcome.val_acc

    def test_mlp_writes_trace_and_checkpoint(self, workspace):
        root, _, config = workspace
        out = root / "train_mlp"
        assert main(["train", "--config", str(config), "--model", "mlp", "--out-dir", str(out)]) == 0
        trace = pd.read_csv(out / "trace.csv")
        assert 1 <= len(trace) <= 3
        assert (out / "model.nafc").is_file()
        assert json.loads((out / "report.json").read_text())["validation"]["mode"] == "holdout"

    def test_seed_required(self, workspace, tmp_path):
        _, csv, _ = workspace
        assert main(["train", "--data", str(csv), "--model", "rf", "--out-dir", str(tmp_path / "o")]) == 2

    def test_missing_data(self, tmp_path):
        code = main(["train", "--seed", "1", "--data", str(tmp_path / "absent.csv"), "--model", "rf",
                     "--out-dir", str(tmp_path / "o")])
        assert code == 2

    def test_bad_override(self, workspace, tmp_path):
        _, _, config = workspace
        code = main(["train", "--config", str(config), "--set", "train.epochz=3", "--out-dir", str(tmp_path / "o")])
        assert code == 2


class TestStudies:
    def test_compare_forests(self, workspace):
        root, _, config = workspace
        out = root / "compare"
        assert main(["compare", "--config", str(config), "--roster", "rf,et", "--out-dir", str(out)]) == 0
        assert list(pd.read_csv(out / "metrics.csv")["model"]) == ["rf", "et"]
        report = json.loads((out / "report.json").read_text())
        assert report["schema_version"] == 1
        assert len(report["seeds"]["fold_seeds"]) == 3

    def test_ablate_forest(self, workspace):
        root, _, config = workspace
        out = root / "ablate"
        assert main(["ablate", "--config", str(config), "--model", "rf", "--out-dir", str(out)]) == 0
        frame = pd.read_csv(out / "ablation.csv")
        assert frame.loc[frame["Acc. Drop"].idxmax(), "Removed Category"] == "covariance"

    def test_explain_top_k(self, workspace):
        root, _, config = workspace
        out = root / "explain"
        assert main(["explain", "--config", str(config), "--top-k", "4", "--out-dir", str(out)]) == 0
        assert len(pd.read_csv(out / "top_features.csv")) == 4
        assert len(pd.read_csv(out / "importance.csv")) == 24
        assert (out / "correlation.csv").is_file()
        assert (out / "shapley_efficiency.csv").is_file()

    def test_explain_enhanced_needs_checkpoint(self, workspace, tmp_path):
        _, _, config = workspace
        code = main(["explain", "--config", str(config), "--explain-model", "enhanced",
                     "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert not (tmp_path / "o").exists()

    def test_report_merges_runs(self, workspace, capsys):
        root, _, config = workspace
        train_dir, explain_dir, out = root / "rep_train", root / "rep_explain", root / "summary"
        assert main(["train", "--config", str(config), "--model", "rf", "--out-dir", str(train_dir)]) == 0
        assert main(["explain", "--config", str(config), "--out-dir", str(explain_dir)]) == 0
        capsys.readouterr()
        assert main(["report", "--run-dir", str(train_dir), "--run-dir", str(explain_dir),
                     "--out-dir", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "Held-out performance" in printed
        assert "Top features by consensus" in printed
        assert (out / "summary.txt").read_text() == printed
        merged = json.loads((out / "summary.json").read_text())
        assert {"training", "interpretability"} <= set(merged)

    def test_same_seed_gives_identical_files(self, workspace):
        root, _, config = workspace
        commands = {
            "train": ["train", "--config", str(config), "--model", "mlp"],
            "compare": ["compare", "--config", str(config), "--roster", "rf,et"],
            "explain": ["explain", "--config", str(config)],
        }
        for name, argv in commands.items():
            first, second = root / f"{name}_a", root / f"{name}_b"
            assert main(argv + ["--out-dir", str(first)]) == 0
            assert main(argv + ["--out-dir", str(second)]) == 0
            assert snapshot(first) == snapshot(second), name

    def test_report_missing_run(self, tmp_path):
        assert main(["report", "--run-dir", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == 2


REAL_DATA = resolve_data_path("emotions.csv")


@pytest.mark.slow
@pytest.mark.skipif(not REAL_DATA.is_file(), reason="public EEG feature table not available")
class TestRealDataset:
    def test_random_forest_baseline(self):
        table = load_csv(REAL_DATA)
        assert table.values.shape == (2529, 988)
        split = stratified_split(table.labels, 0.2, 42)
        forest = random_forest(n_trees=100, seed=42).fit(table.values[split.train_idx], table.labels[split.train_idx])
        accuracy = np.mean(forest.predict(table.values[split.test_idx]) == table.labels[split.test_idx])
        assert accuracy >= 0.92
