"""
Random Forest and Extra Trees classifiers with Gini splitting.

Rows go left when x[feature] <= threshold. Among equally good splits the
lowest feature index wins, then the lowest threshold.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from core.utils import derive_seeds

logger = logging.getLogger(__name__)

# a split must lower weighted Gini by more than this
MIN_DECREASE = 1e-12
LEAF = -1


class ForestError(ValueError):
    pass


def gini(counts) -> float:
    """1 - sum_k (c_k / n)^2"""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ForestError(f"class counts must be non-negative, got {counts}")
    total = counts.sum()
    if total <= 0:
        raise ForestError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.dot(p, p))


@dataclass
class TreeNode:
    counts: np.ndarray
    feature: int = LEAF
    threshold: float = math.nan
    left: "TreeNode" = None
    right: "TreeNode" = None
    impurity_decrease: float = 0.0
    depth: int = 0

    @property
    def n_samples(self) -> int:
        return int(self.counts.sum())

    @property
    def is_leaf(self) -> bool:
        return self.feature == LEAF


@dataclass
class Tree:
    """Flat array form of a grown tree, for vectorized prediction."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity_decrease: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        depth = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, rows) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(rows.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            at = node[active]
            go_left = rows[active, self.feature[at]] <= self.threshold[at]
            node[active] = np.where(go_left, self.left[at], self.right[at])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def predict_proba(self, rows) -> np.ndarray:
        return self.value[self.apply(rows)]


def compile_tree(root: TreeNode, n_classes: int) -> Tree:
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        nodes.append(node)
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)
    index = {id(n): i for i, n in enumerate(nodes)}
    value = np.zeros((len(nodes), n_classes))
    for i, n in enumerate(nodes):
        value[i, :n.counts.size] = n.counts / n.counts.sum()
    return Tree(
        feature=np.array([n.feature for n in nodes], dtype=np.int64),
        threshold=np.array([n.threshold for n in nodes], dtype=np.float64),
        left=np.array([index[id(n.left)] if not n.is_leaf else LEAF for n in nodes], dtype=np.int64),
        right=np.array([index[id(n.right)] if not n.is_leaf else LEAF for n in nodes], dtype=np.int64),
        value=value,
        n_samples=np.array([n.n_samples for n in nodes], dtype=np.int64),
        impurity_decrease=np.array([n.impurity_decrease for n in nodes], dtype=np.float64),
    )


# ====== split search ====== #

def _gini_rows(counts: np.ndarray, totals: np.ndarray) -> np.ndarray:
    p = counts / totals[:, None]
    return 1.0 - np.einsum("ij,ij->i", p, p)


def best_midpoint_split(col, y, n_classes: int, min_samples_leaf: int = 1):
    """
    Exhaustive search over midpoints between consecutive distinct values.

    :return: (weighted child gini, threshold) or None when the column has no valid split
    """
    order = np.argsort(col, kind="stable")
    xs = col[order]
    n = xs.size
    onehot = np.eye(n_classes)[y[order]]
    left_counts = np.cumsum(onehot, axis=0)[:-1]
    right_counts = left_counts[-1] + onehot[-1] - left_counts
    n_left = np.arange(1, n, dtype=np.float64)
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
    if not valid.any():
        return None
    cost = (n_left * _gini_rows(left_counts, n_left) + (n - n_left) * _gini_rows(right_counts, n - n_left)) / n
    cost = np.where(valid, cost, np.inf)
    i = int(np.argmin(cost))
    threshold = 0.5 * (xs[i] + xs[i + 1])
    if threshold >= xs[i + 1]:
        # adjacent floats: the midpoint rounds up
        threshold = xs[i]
    return float(cost[i]), float(threshold)


def random_threshold_split(col, y, n_classes: int, rng, min_samples_leaf: int = 1):
    """One uniform threshold in [min, max); None for a constant column."""
    lo, hi = col.min(), col.max()
    if lo >= hi:
        return None
    threshold = float(rng.uniform(lo, hi))
    go_left = col <= threshold
    n_left = int(go_left.sum())
    n = col.size
    if n_left < min_samples_leaf or n - n_left < min_samples_leaf:
        return None
    left = np.bincount(y[go_left], minlength=n_classes)
    right = np.bincount(y[~go_left], minlength=n_classes)
    cost = (n_left * gini(left) + (n - n_left) * gini(right)) / n
    return cost, threshold


def max_features_count(rule, n_features: int) -> int:
    if rule is None:
        return n_features
    if rule == "sqrt":
        return max(1, int(math.floor(math.sqrt(n_features))))
    if rule == "log2":
        return max(1, int(math.floor(math.log2(n_features))))
    if isinstance(rule, float):
        return max(1, int(rule * n_features))
    return max(1, min(int(rule), n_features))


def build_tree(x, y, n_classes: int, rng, max_features=None, randomized_threshold: bool = False,
               max_depth=None, min_samples_split: int = 2, min_samples_leaf: int = 1) -> TreeNode:
    """
    Grow one Gini tree depth-first.

    :param max_features: candidate features per node ("sqrt", "log2", int, float or None for all)
    :param randomized_threshold: Extra Trees policy (one random threshold per candidate feature)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_features = x.shape[1]
    k = max_features_count(max_features, n_features)
    root = TreeNode(counts=np.bincount(y, minlength=n_classes).astype(np.float64))
    stack = [(root, np.arange(y.size))]
    while stack:
        node, rows = stack.pop()
        parent_gini = gini(node.counts)
        if (parent_gini <= 0.0 or rows.size < min_samples_split
                or (max_depth is not None and node.depth >= max_depth)):
            continue
        candidates = np.sort(rng.choice(n_features, size=k, replace=False)) if k < n_features else range(n_features)
        best = None
        for f in candidates:
            col = x[rows, f]
            if randomized_threshold:
                found = random_threshold_split(col, y[rows], n_classes, rng, min_samples_leaf)
            else:
                found = best_midpoint_split(col, y[rows], n_classes, min_samples_leaf)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(f))
        if best is None:
            continue
        cost, threshold, feature = best
        decrease = parent_gini - cost
        if decrease <= MIN_DECREASE:
            continue
        go_left = x[rows, feature] <= threshold
        left_rows, right_rows = rows[go_left], rows[~go_left]
        node.feature = feature
        node.threshold = threshold
        node.impurity_decrease = decrease
        node.left = TreeNode(counts=np.bincount(y[left_rows], minlength=n_classes).astype(np.float64),
                             depth=node.depth + 1)
        node.right = TreeNode(counts=np.bincount(y[right_rows], minlength=n_classes).astype(np.float64),
                              depth=node.depth + 1)
        stack.append((node.right, right_rows))
        stack.append((node.left, left_rows))
    return root


def _fit_one(x, y, n_classes, seed, forest: "Forest") -> Tree:
    rng = np.random.default_rng(seed)
    if forest.bootstrap:
        picks = rng.integers(0, y.size, size=y.size)
        x, y = x[picks], y[picks]
    root = build_tree(x, y, n_classes, rng, forest.max_features, forest.randomized_threshold,
                      forest.max_depth, forest.min_samples_split, forest.min_samples_leaf)
    return compile_tree(root, n_classes)


# ====== forest ====== #

@dataclass
class Forest:
    n_trees: int = 100
    bootstrap: bool = True
    max_features: object = "sqrt"
    randomized_threshold: bool = False
    max_depth: int = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    seed: int = 0
    n_jobs: int = 1
    trees: list = field(default_factory=list, repr=False)
    n_features: int = 0
    n_classes: int = 0

    def fit(self, x, y, n_classes: int = None) -> "Forest":
        if self.n_trees < 1:
            raise ForestError(f"n_trees must be >= 1, got {self.n_trees}")
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise ForestError(f"need a non-empty 2-D feature matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ForestError(f"{y.size} labels for {x.shape[0]} rows")
        if y.min() < 0:
            raise ForestError("labels must be non-negative class ids")
        self.n_classes = max(int(y.max()) + 1, n_classes or 0)
        self.n_features = x.shape[1]
        seeds = derive_seeds(self.seed, self.n_trees)
        self.trees = Parallel(n_jobs=self.n_jobs)(
            delayed(_fit_one)(x, y, self.n_classes, s, self) for s in seeds
        )
        logger.debug("fitted %d trees, mean depth %.1f", self.n_trees, np.mean([t.depth for t in self.trees]))
        return self

    def _check_rows(self, rows) -> np.ndarray:
        if not self.trees:
            raise ForestError("forest is not fitted")
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.n_features:
            raise ForestError(f"rows have {rows.shape[1]} features, forest was fitted on {self.n_features}")
        return rows

    def predict_proba(self, rows) -> np.ndarray:
        rows = self._check_rows(rows)
        total = np.zeros((rows.shape[0], self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(rows)
        return total / len(self.trees)

    def predict(self, rows) -> np.ndarray:
        # argmax returns the lowest class id on ties
        return np.argmax(self.predict_proba(rows), axis=1)


def random_forest(n_trees: int = 100, seed: int = 0, **kwargs) -> Forest:
    return Forest(n_trees=n_trees, bootstrap=True, randomized_threshold=False, seed=seed, **kwargs)


def extra_trees(n_trees: int = 100, seed: int = 0, **kwargs) -> Forest:
    return Forest(n_trees=n_trees, bootstrap=False, randomized_threshold=True, seed=seed, **kwargs)


def fit_forest(x, y, forest: Forest) -> Forest:
    return forest.fit(x, y)


def impurity_importance(forest: Forest) -> np.ndarray:
    """
    Mean decrease in impurity: per tree, the sum over split nodes of
    (n_node / n_root) * gini decrease, averaged over trees, normalized to 1.
    """
    if not forest.trees:
        raise ForestError("forest is not fitted")
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        split = tree.feature != LEAF
        weights = tree.n_samples[split] / tree.n_samples[0] * tree.impurity_decrease[split]
        total += np.bincount(tree.feature[split], weights=weights, minlength=forest.n_features)
    total /= len(forest.trees)
    s = total.sum()
    return total / s if s > 0 else total
