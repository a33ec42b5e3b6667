import numpy as np
import pytest

from core.config_handler import load_config
from core.data_handler import synth_generate

# a model small enough to train in seconds on 24 features (3 x 8 after reshape)
TINY_OVERRIDES = {
    "model.conv_blocks": [
        {"channels": 4, "kernel": 3, "stride": 1, "residual": False},
        {"channels": 4, "kernel": 3, "stride": 1, "residual": True},
    ],
    "model.lstm_hidden": 4,
    "model.lstm_layers": 1,
    "model.heads_stage1": 2,
    "model.heads_stage2": 2,
    "model.dense_sizes": [8],
    "train.epochs": 3,
    "train.warmup_epochs": 1,
    "train.patience": 2,
    "forest.n_trees": 5,
    "importance.shap_samples": 3,
    "importance.shap_permutations": 4,
    "importance.shap_top": 5,
    "importance.correlation_top_k": 6,
    "experiment.folds": 3,
    "experiment.ablation_runs": 1,
    "experiment.bootstrap_resamples": 50,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """30 rows per class, 24 features, class signal only in the covariance columns."""
    return synth_generate(30, 24, "covariance", 5.0, seed=7)


@pytest.fixture
def tiny_config():
    return load_config(overrides={**TINY_OVERRIDES, "seed": 3})
