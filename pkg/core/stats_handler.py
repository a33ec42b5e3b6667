"""
Classification metrics and the significance machinery used to compare models
across cross-validation folds.
"""
import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from core.data_handler import CLASS_NAMES

logger = logging.getLogger(__name__)

# largest n for which the Wilcoxon null distribution is enumerated
WILCOXON_EXACT_MAX = 15
MINIMAL_GAP = 0.02


# ====== metrics ====== #

def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    """Rows are actual classes, columns predicted."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.size} labels vs {y_pred.size} predictions")
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division: bool = False

    def summary(self) -> dict:
        """Accuracy and macro averages."""
        return {
            "accuracy": self.accuracy,
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "f1": self.macro_f1,
        }

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("precision", "recall", "f1", "support"):
            doc[key] = np.asarray(doc[key]).tolist()
        return doc


def _safe_ratio(num: np.ndarray, den: np.ndarray):
    zero = den == 0
    return np.divide(num, den, out=np.zeros(num.shape), where=~zero), bool(zero.any())


def metrics(confusion) -> ClassificationMetrics:
    cm = np.asarray(confusion, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    precision, zp = _safe_ratio(tp, cm.sum(axis=0))
    recall, zr = _safe_ratio(tp, support)
    f1, zf = _safe_ratio(2 * precision * recall, precision + recall)
    zero_division = zp or zr or zf
    if zero_division:
        logger.warning("zero division in precision/recall; affected entries set to 0")
    weights = support / total
    return ClassificationMetrics(
        accuracy=float(tp.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float(weights @ precision),
        weighted_recall=float(weights @ recall),
        weighted_f1=float(weights @ f1),
        zero_division=zero_division,
    )


def per_class_table(m: ClassificationMetrics, class_names=CLASS_NAMES) -> pd.DataFrame:
    rows = [
        {"class": name, "precision": m.precision[i], "recall": m.recall[i], "f1": m.f1[i], "support": int(m.support[i])}
        for i, name in enumerate(class_names)
    ]
    total = int(m.support.sum())
    rows.append({"class": "macro avg", "precision": m.macro_precision, "recall": m.macro_recall,
                 "f1": m.macro_f1, "support": total})
    rows.append({"class": "weighted avg", "precision": m.weighted_precision, "recall": m.weighted_recall,
                 "f1": m.weighted_f1, "support": total})
    return pd.DataFrame(rows)


# ====== significance tests ====== #

@dataclass
class StatTestResult:
    method: str
    statistic: float
    p_value: float
    correction: str = "none"
    pairs: list = field(default_factory=list)
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def friedman(scores) -> StatTestResult:
    """
    :param scores: M methods x K folds; higher is better
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise ValueError(f"friedman needs at least 2 methods x 2 folds, got shape {scores.shape}")
    m, k = scores.shape
    # rank within each fold; ties share the average rank
    ranks = np.apply_along_axis(stats.rankdata, 0, scores)
    mean_ranks = ranks.mean(axis=1)
    chi2 = 12.0 * k / (m * (m + 1)) * (np.sum(mean_ranks ** 2) - m * (m + 1) ** 2 / 4.0)
    chi2 = max(0.0, float(chi2))
    p = float(stats.chi2.sf(chi2, m - 1)) if chi2 > 0 else 1.0
    return StatTestResult(method="friedman", statistic=chi2, p_value=min(1.0, p))


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    return d, stats.rankdata(np.abs(d))


def wilcoxon_exact_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided p by enumerating all 2^n sign assignments of `ranks`."""
    n = ranks.size
    patterns = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(np.float64)
    w_plus = patterns @ ranks
    # rank sums are multiples of 0.5
    p = 2.0 * np.count_nonzero(w_plus <= w + 1e-9) / patterns.shape[0]
    return min(1.0, p)


def wilcoxon_signed_rank(a, b) -> StatTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    d, ranks = _signed_ranks(a, b)
    n = d.size
    if n == 0:
        return StatTestResult(method="wilcoxon", statistic=0.0, p_value=1.0, note="all differences zero")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= WILCOXON_EXACT_MAX:
        return StatTestResult(method="wilcoxon-exact", statistic=w, p_value=wilcoxon_exact_p(ranks, w))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(0.0, abs(w - mean) - 0.5) / np.sqrt(var)
    p = min(1.0, float(2.0 * stats.norm.sf(z)))
    return StatTestResult(method="wilcoxon-normal", statistic=w, p_value=p)


def bonferroni(pvals, m: int = None) -> np.ndarray:
    pvals = np.asarray(pvals, dtype=np.float64)
    m = pvals.size if m is None else m
    return np.minimum(1.0, pvals * m)


def pairwise_wilcoxon(scores: dict) -> StatTestResult:
    """
    Wilcoxon signed-rank for every pair of methods, Bonferroni-adjusted over
    the number of pairs.

    :param scores: method name -> per-fold scores
    """
    names = list(scores)
    pairs = list(itertools.combinations(names, 2))
    if not pairs:
        return StatTestResult(method="wilcoxon", statistic=float("nan"), p_value=1.0,
                              correction="bonferroni", note="insufficient methods")
    results = [wilcoxon_signed_rank(scores[a], scores[b]) for a, b in pairs]
    adjusted = bonferroni([r.p_value for r in results], len(pairs))
    rows = [
        {"a": a, "b": b, "statistic": r.statistic, "p_value": r.p_value, "p_adjusted": float(p), "method": r.method}
        for (a, b), r, p in zip(pairs, results, adjusted)
    ]
    return StatTestResult(method="wilcoxon", statistic=float("nan"), p_value=float(adjusted.min()),
                          correction="bonferroni", pairs=rows)


# ====== intervals and gaps ====== #

def bootstrap_ci(y_true, y_pred, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple:
    """
    Percentile interval of accuracy under case resampling within each class.

    :return: (lower, upper)
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("bootstrap_ci needs at least one prediction")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    correct = (y_true == y_pred).astype(np.float64)
    rng = np.random.default_rng(seed)
    hits = np.zeros(n_resamples)
    for c in np.unique(y_true):
        members = correct[y_true == c]
        picks = rng.integers(0, members.size, size=(n_resamples, members.size))
        hits += members[picks].sum(axis=1)
    accuracies = hits / y_true.size
    alpha = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(accuracies, [alpha, 100.0 - alpha])
    return float(lower), float(upper)


def overfitting_gap(train_acc: float, val_acc: float) -> float:
    """train - val; negative when validation is higher."""
    return float(train_acc) - float(val_acc)


def overfitting_level(gap: float, threshold: float = MINIMAL_GAP) -> str:
    return "minimal" if abs(gap) < threshold else "moderate"
