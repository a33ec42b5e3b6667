"""
Feature relevance: mutual information, ANOVA F, Pearson correlation with the
label code, forest impurity importances, their min-max consensus, permutation
Shapley attributions and the label/feature correlation matrix.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from core.utils import derive_seeds

logger = logging.getLogger(__name__)

MI_BINS = 10
METHODS = ("mutual_information", "anova_f", "pearson", "rf_importance", "et_importance")
EXACT_SHAPLEY_MAX_FEATURES = 16
# composite rows evaluated per predictor call, in matrix cells
SHAPLEY_CHUNK_CELLS = 1 << 22


# ====== per-feature scorers ====== #

def _equal_frequency_bins(col: np.ndarray, n_bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(col, np.linspace(0.0, 1.0, n_bins + 1)[1:-1]))
    return np.digitize(col, edges)


def mutual_information(col, labels, n_bins: int = MI_BINS) -> float:
    """I(X; Y) in nats with X discretized into equal-frequency bins."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    col = np.asarray(col, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.all(col == col[0]):
        return 0.0
    bins = _equal_frequency_bins(col, n_bins)
    h_x = stats.entropy(np.bincount(bins))
    h_x_given_y = 0.0
    for c in np.unique(labels):
        members = labels == c
        h_x_given_y += members.mean() * stats.entropy(np.bincount(bins[members]))
    return max(0.0, float(h_x - h_x_given_y))


def anova_f(x, labels) -> np.ndarray:
    """
    One-way ANOVA F per column. Zero within-group variance with distinct
    group means gives +inf; a column constant everywhere gives 0.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    groups = [x[labels == c] for c in np.unique(labels)]
    if any(g.shape[0] < 2 for g in groups):
        raise ValueError("anova_f needs at least 2 samples per class")
    with warnings.catch_warnings(), np.errstate(divide="ignore", invalid="ignore"):
        warnings.simplefilter("ignore")
        f = np.atleast_1d(stats.f_oneway(*groups, axis=0).statistic).astype(np.float64)
    # 0/0: no between-group and no within-group spread
    f = np.where(np.isnan(f), 0.0, f)
    return float(f[0]) if single else f


def pearson_r(col, labels) -> float:
    col = np.asarray(col, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.all(col == col[0]) or np.all(labels == labels[0]):
        logger.warning("pearson_r on a constant input; reporting 0")
        return 0.0
    return float(np.clip(stats.pearsonr(col, labels).statistic, -1.0, 1.0))


def pearson_scores(x, labels) -> np.ndarray:
    """Column-wise Pearson r against the label code; constant columns get 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum(axis=0) * (yc @ yc))
    constant = denom == 0
    if constant.any():
        logger.warning("%d constant column(s) get Pearson r = 0", int(constant.sum()))
    r = np.divide(yc @ xc, denom, out=np.zeros(x.shape[1]), where=~constant)
    return np.clip(r, -1.0, 1.0)


def mutual_information_scores(x, labels, n_bins: int = MI_BINS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.array([mutual_information(x[:, j], labels, n_bins) for j in range(x.shape[1])])


# ====== consensus ====== #

def minmax_normalize(scores) -> np.ndarray:
    """
    Map to [0, 1]. +inf entries take the largest finite value first; a
    constant vector maps to all zeros.
    """
    s = np.asarray(scores, dtype=np.float64).copy()
    finite = np.isfinite(s)
    if not finite.all():
        s[~finite & (s > 0)] = s[finite].max() if finite.any() else 1.0
        s[~np.isfinite(s)] = s[finite].min() if finite.any() else 0.0
    lo, hi = s.min(), s.max()
    if hi - lo <= 0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


@dataclass
class ImportanceTable:
    feature_names: tuple
    scores: dict
    normalized: dict
    consensus: np.ndarray
    ranking: np.ndarray

    def rank_of(self) -> np.ndarray:
        """1-based rank per feature."""
        ranks = np.empty(self.ranking.size, dtype=np.int64)
        ranks[self.ranking] = np.arange(1, self.ranking.size + 1)
        return ranks

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"feature": list(self.feature_names)})
        for method, values in self.scores.items():
            frame[method] = values
        frame["consensus"] = self.consensus
        frame["rank"] = self.rank_of()
        return frame.iloc[self.ranking].reset_index(drop=True)

    def top(self, k: int) -> pd.DataFrame:
        return self.to_frame().head(k)


def consensus_rank(scores: dict, feature_names) -> ImportanceTable:
    """
    :param scores: method name -> length-D score vector (Pearson as |r|)
    """
    names = tuple(feature_names)
    normalized = {}
    for method, values in scores.items():
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(names),):
            raise ValueError(f"{method}: {values.size} scores for {len(names)} features")
        normalized[method] = minmax_normalize(values)
        if not normalized[method].any():
            logger.warning("%s scores are constant; contributing 0 to the consensus", method)
    consensus = np.sum(list(normalized.values()), axis=0) / len(normalized)
    # descending consensus, then feature index
    ranking = np.lexsort((np.arange(len(names)), -consensus))
    return ImportanceTable(
        feature_names=names,
        scores={m: np.asarray(v, dtype=np.float64) for m, v in scores.items()},
        normalized=normalized,
        consensus=consensus,
        ranking=ranking,
    )


def score_features(x, labels, feature_names, rf_importance, et_importance, n_bins: int = MI_BINS) -> ImportanceTable:
    scores = {
        "mutual_information": mutual_information_scores(x, labels, n_bins),
        "anova_f": anova_f(x, labels),
        "pearson": np.abs(pearson_scores(x, labels)),
        "rf_importance": np.asarray(rf_importance, dtype=np.float64),
        "et_importance": np.asarray(et_importance, dtype=np.float64),
    }
    return consensus_rank(scores, feature_names)


# ====== Shapley ====== #

@dataclass
class ShapleyReport:
    phi: np.ndarray
    std_error: np.ndarray
    n_permutations: int
    reference: np.ndarray = field(repr=False)
    target: int
    prediction: float
    base_value: float

    @property
    def efficiency_residual(self) -> float:
        """sum(phi) - (f(sample) - f(reference))"""
        return float(self.phi.sum() - (self.prediction - self.base_value))

    @property
    def efficiency_tolerance(self) -> float:
        """3 Monte-Carlo standard errors of sum(phi)."""
        return float(3.0 * math.sqrt(np.sum(self.std_error ** 2)))


def _scalar_output(predictor, rows, target):
    out = np.asarray(predictor(rows), dtype=np.float64)
    if out.ndim == 1:
        return out
    return out[:, target]


def _resolve_target(predictor, sample, target):
    if target is not None:
        return int(target)
    out = np.asarray(predictor(sample[None, :]), dtype=np.float64)
    return 0 if out.ndim == 1 else int(np.argmax(out[0]))


def background_reference(background, n_features: int) -> np.ndarray:
    background = np.asarray(background, dtype=np.float64)
    if background.size == 0:
        logger.warning("empty Shapley background; using the zero vector as reference")
        return np.zeros(n_features)
    return np.atleast_2d(background).mean(axis=0)


def shapley_mc(predictor, sample, background, n_permutations: int = 100, seed: int = 0,
               target: int = None) -> ShapleyReport:
    """
    Permutation-sampling Shapley values of one sample. Features outside a
    coalition take the background mean. Each permutation walks from the
    reference to the sample one feature at a time, so every permutation's
    contributions sum to f(sample) - f(reference).

    :param predictor: rows[n, D] -> probabilities [n, C] (or scores [n])
    :param target: explained class; defaults to the predicted class of the sample
    """
    if n_permutations < 1:
        raise ValueError(f"n_permutations must be >= 1, got {n_permutations}")
    sample = np.asarray(sample, dtype=np.float64).reshape(-1)
    d = sample.size
    reference = background_reference(background, d)
    target = _resolve_target(predictor, sample, target)
    rng = np.random.default_rng(seed)

    contributions = np.zeros((n_permutations, d))
    chunk = max(1, SHAPLEY_CHUNK_CELLS // ((d + 1) * d))
    for start in range(0, n_permutations, chunk):
        count = min(chunk, n_permutations - start)
        perms = np.array([rng.permutation(d) for _ in range(count)])
        position = np.argsort(perms, axis=1)
        # rows[p, k] = reference with the first k features of perms[p] taken from sample
        take = position[:, None, :] < np.arange(d + 1)[None, :, None]
        rows = np.where(take, sample, reference)
        values = _scalar_output(predictor, rows.reshape(-1, d), target).reshape(count, d + 1)
        steps = np.diff(values, axis=1)
        np.put_along_axis(contributions[start:start + count], perms, steps, axis=1)

    phi = contributions.mean(axis=0)
    ddof = 1 if n_permutations > 1 else 0
    std_error = contributions.std(axis=0, ddof=ddof) / math.sqrt(n_permutations)
    ends = _scalar_output(predictor, np.vstack([sample, reference]), target)
    return ShapleyReport(phi=phi, std_error=std_error, n_permutations=n_permutations, reference=reference,
                         target=target, prediction=float(ends[0]), base_value=float(ends[1]))


def shapley_exact(predictor, sample, reference, target: int = None) -> np.ndarray:
    """Exact Shapley values by enumerating all 2^D coalitions."""
    sample = np.asarray(sample, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    d = sample.size
    if d > EXACT_SHAPLEY_MAX_FEATURES:
        raise ValueError(f"exact Shapley enumeration is limited to {EXACT_SHAPLEY_MAX_FEATURES} features, got {d}")
    target = _resolve_target(predictor, sample, target)
    masks = np.arange(2 ** d)
    members = ((masks[:, None] >> np.arange(d)) & 1).astype(bool)
    values = _scalar_output(predictor, np.where(members, sample, reference), target)
    sizes = members.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0
                       for s in range(d + 1)])
    phi = np.zeros(d)
    for i in range(d):
        without = ~members[:, i]
        phi[i] = np.sum(weight[sizes[without]] * (values[masks[without] | (1 << i)] - values[masks[without]]))
    return phi


def explain_samples(predictor, samples, background, n_permutations: int, seed: int, target=None) -> list:
    """One ShapleyReport per row of `samples`, each with its own derived seed."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    seeds = derive_seeds(seed, samples.shape[0])
    reports = []
    for i, (row, s) in enumerate(zip(samples, seeds)):
        reports.append(shapley_mc(predictor, row, background, n_permutations, s, target))
        logger.debug("explained sample %d/%d", i + 1, samples.shape[0])
    return reports


def shap_summary(reports, rf_importance, feature_names, top: int = 20) -> pd.DataFrame:
    """Features ranked by mean |phi| over the explained samples, beside their RF importance."""
    names = list(feature_names)
    mean_abs = np.mean([np.abs(r.phi) for r in reports], axis=0)
    order = np.lexsort((np.arange(len(names)), -mean_abs))[:top]
    return pd.DataFrame({
        "feature": [names[i] for i in order],
        "mean_abs_shap": mean_abs[order],
        "rf_importance": np.asarray(rf_importance, dtype=np.float64)[order],
        "rank": np.arange(1, order.size + 1),
    })


def shapley_frame(reports) -> pd.DataFrame:
    """Per-sample efficiency check."""
    return pd.DataFrame({
        "sample": np.arange(len(reports)),
        "target": [r.target for r in reports],
        "prediction": [r.prediction for r in reports],
        "base_value": [r.base_value for r in reports],
        "sum_phi": [float(r.phi.sum()) for r in reports],
        "efficiency_residual": [r.efficiency_residual for r in reports],
        "tolerance": [r.efficiency_tolerance for r in reports],
    })


# ====== correlation ====== #

@dataclass
class CorrelationResult:
    matrix: np.ndarray
    names: tuple
    indices: np.ndarray
    label_r: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=list(self.names), columns=list(self.names))


def correlation_matrix(x, labels, feature_names, top_k: int = 30, label_name: str = "label") -> CorrelationResult:
    """
    Pearson matrix over the top_k features by |r| with the label code, plus
    the label itself as the last row/column.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= top_k <= x.shape[1]:
        raise ValueError(f"top_k must be in [1, {x.shape[1]}], got {top_k}")
    r = pearson_scores(x, labels)
    indices = np.lexsort((np.arange(r.size), -np.abs(r)))[:top_k]
    block = np.column_stack([x[:, indices], np.asarray(labels, dtype=np.float64)])
    with np.errstate(divide="ignore", invalid="ignore"):
        matrix = np.corrcoef(block, rowvar=False)
    matrix = np.nan_to_num(matrix, nan=0.0)
    matrix = np.clip(0.5 * (matrix + matrix.T), -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)
    names = tuple(feature_names[i] for i in indices) + (label_name,)
    return CorrelationResult(matrix=matrix, names=names, indices=indices, label_r=r[indices])
