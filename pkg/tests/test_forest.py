from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.forest_handler import (ForestError, best_midpoint_split, build_tree, compile_tree, extra_trees, gini,
                                 impurity_importance, max_features_count, random_forest)


class TestGini:
    def test_pure_and_balanced(self):
        assert gini([5, 0, 0]) == 0.0
        assert gini([1, 1, 1]) == pytest.approx(2.0 / 3.0)
        assert gini([2, 2]) == pytest.approx(0.5)

    def test_empty_node(self):
        with pytest.raises(ForestError, match="empty"):
            gini([0, 0, 0])


class TestSplits:
    def test_midpoint_between_distinct_values(self):
        col = np.array([1.0, 2.0, 3.0, 10.0, 11.0, 12.0])
        y = np.array([0, 0, 0, 1, 1, 1])
        cost, threshold = best_midpoint_split(col, y, 2)
        assert cost == 0.0
        assert threshold == 6.5

    def test_constant_column_has_no_split(self):
        assert best_midpoint_split(np.ones(4), np.array([0, 1, 0, 1]), 2) is None

    def test_tie_goes_to_lowest_feature(self):
        """Two identical columns: the tree splits on the first one."""
        col = np.array([0.0, 1.0, 2.0, 3.0])
        x = np.column_stack([col, col])
        root = build_tree(x, np.array([0, 0, 1, 1]), 2, np.random.default_rng(0))
        assert root.feature == 0
        assert root.threshold == 1.5

    def test_left_is_less_or_equal(self):
        x = np.array([[0.0], [1.0], [1.0], [2.0]])
        root = build_tree(x, np.array([0, 0, 0, 1]), 2, np.random.default_rng(0))
        tree = compile_tree(root, 2)
        assert_array_equal(tree.predict_proba(np.array([[1.5]])), [[1.0, 0.0]])
        assert_array_equal(tree.predict_proba(np.array([[1.6]])), [[0.0, 1.0]])

    @pytest.mark.parametrize("rule, expected", [("sqrt", 31), ("log2", 9), (None, 988), (10, 10), (0.5, 494)])
    def test_max_features(self, rule, expected):
        assert max_features_count(rule, 988) == expected


class TestTree:
    def test_grows_pure_leaves(self, rng):
        x = rng.normal(size=(60, 4))
        y = (x[:, 2] > 0).astype(np.int64) + (x[:, 0] > 1).astype(np.int64)
        tree = compile_tree(build_tree(x, y, 3, rng), 3)
        assert_array_equal(np.argmax(tree.predict_proba(x), axis=1), y)
        assert np.all(tree.impurity_decrease[tree.feature >= 0] > 0)

    def test_max_depth(self, rng):
        x = rng.normal(size=(80, 3))
        y = rng.integers(0, 3, size=80)
        tree = compile_tree(build_tree(x, y, 3, rng, max_depth=2), 3)
        assert tree.depth <= 2

    def test_leaf_distributions_sum_to_one(self, rng):
        x = rng.normal(size=(40, 3))
        y = rng.integers(0, 3, size=40)
        tree = compile_tree(build_tree(x, y, 3, rng, min_samples_leaf=5), 3)
        assert_allclose(tree.value.sum(axis=1), 1.0)
        leaves = tree.feature < 0
        assert tree.n_samples[leaves].min() >= 5

    def test_stump_recovers_planted_threshold(self, rng):
        x = rng.uniform(-1.0, 1.0, size=(200, 1))
        y = (x[:, 0] > 0.3).astype(np.int64)
        root = build_tree(x, y, 2, rng, max_depth=1)
        below, above = x[x[:, 0] <= 0.3, 0].max(), x[x[:, 0] > 0.3, 0].min()
        assert root.feature == 0
        assert root.threshold == pytest.approx((below + above) / 2)
        assert root.left.is_leaf and root.right.is_leaf


class TestForest:
    def test_random_forest_on_separable_data(self, small_synth):
        table, _ = small_synth
        forest = random_forest(n_trees=20, seed=0).fit(table.values, table.labels)
        assert np.mean(forest.predict(table.values) == table.labels) >= 0.95

    def test_extra_trees_on_separable_data(self, small_synth):
        table, _ = small_synth
        forest = extra_trees(n_trees=20, seed=0).fit(table.values, table.labels)
        assert np.mean(forest.predict(table.values) == table.labels) >= 0.95
        assert not forest.bootstrap
        assert forest.randomized_threshold

    def test_probabilities(self, small_synth):
        table, _ = small_synth
        probs = random_forest(n_trees=5, seed=1).fit(table.values, table.labels).predict_proba(table.values[:7])
        assert probs.shape == (7, 3)
        assert_allclose(probs.sum(axis=1), 1.0)

    def test_seeded_and_parallel_identical(self, small_synth):
        """Per-tree seeds make the forest independent of the worker count."""
        table, _ = small_synth
        a = random_forest(n_trees=6, seed=3).fit(table.values, table.labels)
        b = random_forest(n_trees=6, seed=3, n_jobs=2).fit(table.values, table.labels)
        assert_array_equal(a.predict_proba(table.values), b.predict_proba(table.values))

    def test_importance_points_at_planted_category(self, small_synth):
        table, cmap = small_synth
        forest = random_forest(n_trees=30, seed=0).fit(table.values, table.labels)
        importance = impurity_importance(forest)
        assert importance.sum() == pytest.approx(1.0)
        planted = cmap.indices_of("covariance")
        assert importance[planted].sum() > 0.5
        assert int(np.argmax(importance)) in planted

    def test_learns_xor_interaction(self, rng):
        def xor(n):
            x = rng.uniform(-1.0, 1.0, size=(n, 2))
            return x, ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(np.int64)

        x, y = xor(200)
        x_new, y_new = xor(200)
        forest = random_forest(n_trees=50, seed=0).fit(x, y)
        assert np.mean(forest.predict(x_new) == y_new) > 0.9

    def test_noise_importance_stays_under_ceiling(self):
        """No pure-noise feature exceeds 3/sqrt(D), averaged over 10 seeds."""
        d = 16
        importances = []
        for seed in range(10):
            r = np.random.default_rng(seed)
            x, y = r.normal(size=(150, d)), r.integers(0, 3, size=150)
            importances.append(impurity_importance(random_forest(n_trees=20, seed=seed).fit(x, y)))
        assert np.mean(importances, axis=0).max() < 3.0 / np.sqrt(d)

    def test_random_forest_equals_extra_trees_without_randomization(self, small_synth):
        table, _ = small_synth
        rf = replace(random_forest(n_trees=4, seed=2), bootstrap=False).fit(table.values, table.labels)
        et = replace(extra_trees(n_trees=4, seed=2), randomized_threshold=False).fit(table.values, table.labels)
        for a, b in zip(rf.trees, et.trees):
            assert_array_equal(a.feature, b.feature)
            assert_array_equal(a.threshold, b.threshold)
        assert_array_equal(rf.predict_proba(table.values), et.predict_proba(table.values))

    def test_width_mismatch(self, small_synth):
        table, _ = small_synth
        forest = random_forest(n_trees=2, seed=0).fit(table.values, table.labels)
        with pytest.raises(ForestError, match="rows have 3 features"):
            forest.predict(np.zeros((1, 3)))

    def test_unfitted(self):
        with pytest.raises(ForestError, match="not fitted"):
            random_forest(n_trees=2).predict(np.zeros((1, 3)))

    def test_empty_input(self):
        with pytest.raises(ForestError, match="non-empty"):
            random_forest(n_trees=2).fit(np.zeros((0, 3)), np.zeros(0, dtype=int))
