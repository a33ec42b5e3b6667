import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from core.utils import atomic_write_text

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Neutral", "Positive", "Negative")
LABEL_CODES = {"NEUTRAL": 0, "POSITIVE": 1, "NEGATIVE": 2}
LABEL_COLUMN = "label"

CATEGORIES = ("statistical", "frequency", "covariance", "eigenvalue", "other")
DEFAULT_CATEGORY = "other"

# floor for the z-score denominator; only bites on (near) constant columns
NORM_EPS = 1e-8


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureTable:
    values: np.ndarray
    feature_names: tuple
    labels: np.ndarray
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        names = tuple(str(n) for n in self.feature_names)
        ok, msg = is_valid_feature_table(values, names, labels)
        if not ok:
            raise DataError(msg)
        values.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def select_features(self, indices) -> "FeatureTable":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureTable(
            values=self.values[:, indices],
            feature_names=tuple(self.feature_names[i] for i in indices),
            labels=self.labels,
            class_names=self.class_names,
        )


def is_valid_feature_table(values, names, labels):
    """
    :return: tuple (bool, str) - (valid, reason)
    """
    if values.ndim != 2:
        return False, f"values must be a 2-D matrix, got {values.ndim} dimensions"
    n, d = values.shape
    if n == 0 or d == 0:
        return False, f"table must be non-empty, got {n} rows x {d} columns"
    if len(names) != d:
        return False, f"{len(names)} feature names for {d} columns"
    if len(set(names)) != d:
        dup = next(name for i, name in enumerate(names) if name in names[:i])
        return False, f"duplicate feature name '{dup}'"
    if labels.shape != (n,):
        return False, f"{labels.shape[0]} labels for {n} rows"
    bad = np.flatnonzero((labels < 0) | (labels > 2))
    if bad.size:
        return False, f"label {labels[bad[0]]} at row {bad[0]} is not in {{0,1,2}}"
    if not np.all(np.isfinite(values)):
        r, c = np.argwhere(~np.isfinite(values))[0]
        return False, f"non-finite value at row {r}, column '{names[c]}'"
    return True, "ok"


@dataclass(frozen=True)
class Normalizer:
    means: np.ndarray
    stds: np.ndarray
    epsilon: float = NORM_EPS


@dataclass(frozen=True)
class SplitIndices:
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass(frozen=True)
class CategoryRule:
    pattern: str
    category: str
    mode: str = "prefix"

    def matches(self, name: str) -> bool:
        clean = name.lstrip("# ").lower()
        pattern = self.pattern.lower()
        if self.mode == "prefix":
            return clean.startswith(pattern)
        return pattern in clean


@dataclass(frozen=True)
class CategoryMap:
    assignment: tuple
    feature_names: tuple = field(default=())

    def indices_of(self, category: str) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.assignment) if c == category], dtype=np.int64)

    def present(self) -> list:
        return [c for c in CATEGORIES if c in self.assignment]

    def counts(self) -> dict:
        return {c: int(sum(1 for a in self.assignment if a == c)) for c in self.present()}


# ====== ingestion ====== #

def _row_of(i: int) -> int:
    # header is line 1
    return i + 2


def load_csv(path, label_column: str = LABEL_COLUMN) -> FeatureTable:
    """
    Read a featurized EEG table.

    Textual labels NEUTRAL/POSITIVE/NEGATIVE (any case) map to 0/1/2; integer
    labels 0/1/2 are accepted as-is. Errors name the CSV line and column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DataError(f"{path}: empty file") from e
    if frame.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    if label_column not in frame.columns:
        raise DataError(f"{path}: missing label column '{label_column}'")

    labels = np.empty(frame.shape[0], dtype=np.int64)
    for i, raw in enumerate(frame[label_column].str.strip()):
        code = LABEL_CODES.get(raw.upper())
        if code is None and raw in ("0", "1", "2"):
            code = int(raw)
        if code is None:
            raise DataError(f"{path}: line {_row_of(i)}, column '{label_column}': unknown label '{raw}'")
        labels[i] = code

    features = frame.drop(columns=[label_column])
    if features.shape[1] == 0:
        raise DataError(f"{path}: no feature columns")
    values = np.empty(features.shape, dtype=np.float64)
    for j, name in enumerate(features.columns):
        column = features[name].str.strip()
        numeric = pd.to_numeric(column, errors="coerce")
        bad = np.flatnonzero(~np.isfinite(numeric.to_numpy(dtype=np.float64)))
        if bad.size:
            i = bad[0]
            raise DataError(
                f"{path}: line {_row_of(i)}, column '{name}': non-numeric or non-finite cell '{column.iloc[i]}'"
            )
        # astype parses with float(), which round-trips 17-digit output exactly
        values[:, j] = column.to_numpy(dtype=object).astype(np.float64)

    table = FeatureTable(values=values, feature_names=tuple(features.columns), labels=labels)
    logger.info("loaded %s: %d samples x %d features", path, table.n_samples, table.n_features)
    return table


def write_csv(table: FeatureTable, path, label_column: str = LABEL_COLUMN):
    """Write with 17 significant digits so a reload is exact."""
    frame = pd.DataFrame(table.values, columns=list(table.feature_names))
    frame[label_column] = [k.upper() for k in np.asarray(CLASS_NAMES)[table.labels]]
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


# ====== normalization ====== #

def fit_normalizer(values, train_idx, epsilon: float = NORM_EPS) -> Normalizer:
    """Population mean/std over training rows only."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise DataError("cannot fit a normalizer on zero training rows")
    rows = np.asarray(values, dtype=np.float64)[train_idx]
    return Normalizer(means=rows.mean(axis=0), stds=rows.std(axis=0, ddof=0), epsilon=epsilon)


def apply_normalizer(norm: Normalizer, rows) -> np.ndarray:
    # floor is max(sigma, eps) rather than sigma + eps: unit variance stays exact on
    # training rows, and constant columns still map to 0
    return (np.asarray(rows, dtype=np.float64) - norm.means) / np.maximum(norm.stds, norm.epsilon)


# ====== splitting ====== #

def _largest_remainder(counts: np.ndarray, fraction: float) -> np.ndarray:
    quotas = counts * fraction
    alloc = np.floor(quotas).astype(np.int64)
    total = int(round(counts.sum() * fraction))
    remainder = quotas - alloc
    # stable sort: equal remainders go to the lowest class id first
    order = np.argsort(-remainder, kind="stable")
    for k in order[: max(total - alloc.sum(), 0)]:
        alloc[k] += 1
    return alloc


def stratified_split(labels, test_fraction: float, seed: int) -> SplitIndices:
    """
    Per-class shuffle, then largest-remainder allocation of test slots so the
    overall test size is round(N * test_fraction).
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    for c, n in zip(classes, counts):
        if n < 2:
            raise DataError(f"class {c} has {n} sample(s); need at least 2 to populate both sides")

    alloc = _largest_remainder(counts, test_fraction)
    # both sides keep at least one sample of every class
    alloc = np.clip(alloc, 1, counts - 1)

    rng = np.random.default_rng(seed)
    test_parts = []
    train_parts = []
    for c, k in zip(classes, alloc):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_parts.append(idx[:k])
        train_parts.append(idx[k:])
    return SplitIndices(
        train_idx=np.sort(np.concatenate(train_parts)),
        test_idx=np.sort(np.concatenate(test_parts)),
    )


def kfold(labels, k: int = 5, seed: int = 0) -> list:
    """Stratified k-fold: each class is shuffled and dealt round-robin to folds."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    smallest = min(int((labels == c).sum()) for c in classes)
    if k > smallest:
        raise DataError(f"k={k} exceeds the smallest class count ({smallest})")

    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        # rotate the starting fold so remainders spread across folds
        fold_of[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    everything = np.arange(labels.size)
    return [
        SplitIndices(train_idx=everything[fold_of != f], test_idx=everything[fold_of == f])
        for f in range(k)
    ]


# ====== augmentation ====== #

def augment(batch, noise_sigma: float = 0.05, scale_lo: float = 0.9, scale_hi: float = 1.1, seed=None) -> np.ndarray:
    """
    Per-row random scaling followed by per-element Gaussian noise.

    :param seed: int or np.random.Generator
    """
    if scale_lo > scale_hi:
        raise DataError(f"scale_lo ({scale_lo}) > scale_hi ({scale_hi})")
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    batch = np.asarray(batch, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = rng.uniform(scale_lo, scale_hi, size=(batch.shape[0], 1))
    out = batch * scale
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, size=batch.shape)
    return out


# ====== feature categories ====== #

DEFAULT_RULES = (
    CategoryRule("covmat", "covariance"),
    CategoryRule("correlate", "covariance"),
    CategoryRule("eigen", "eigenvalue"),
    CategoryRule("logm", "eigenvalue"),
    CategoryRule("fft", "frequency"),
    CategoryRule("freq", "frequency"),
    CategoryRule("mean", "statistical"),
    CategoryRule("stddev", "statistical"),
    CategoryRule("moments", "statistical"),
    CategoryRule("max", "statistical"),
    CategoryRule("min", "statistical"),
    CategoryRule("entropy", "statistical"),
)


def default_category_rules() -> tuple:
    return DEFAULT_RULES


def categorize_features(names, rules=DEFAULT_RULES, default: str = DEFAULT_CATEGORY) -> CategoryMap:
    """First matching rule wins; unmatched names land in `default`."""
    if not rules:
        raise DataError("category rules must be non-empty")
    assignment = []
    for name in names:
        category = next((r.category for r in rules if r.matches(str(name))), default)
        assignment.append(category)
    return CategoryMap(assignment=tuple(assignment), feature_names=tuple(str(n) for n in names))


def rules_from_records(records) -> tuple:
    rules = []
    for i, rec in enumerate(records):
        try:
            rule = CategoryRule(str(rec["pattern"]), str(rec["category"]), str(rec.get("mode", "prefix")))
        except (KeyError, TypeError) as e:
            raise DataError(f"categories.rules[{i}]: expected mapping with 'pattern' and 'category'") from e
        if rule.category not in CATEGORIES:
            raise DataError(f"categories.rules[{i}]: unknown category '{rule.category}'")
        if rule.mode not in ("prefix", "substring"):
            raise DataError(f"categories.rules[{i}]: mode must be prefix or substring, got '{rule.mode}'")
        rules.append(rule)
    return tuple(rules)


def load_category_rules(path) -> tuple:
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f) or {}
    records = doc.get("categories", {}).get("rules") if isinstance(doc, dict) else None
    if not records:
        raise DataError(f"{path}: no categories.rules entries")
    return rules_from_records(records)


def dump_category_rules(rules, path):
    doc = {"categories": {"rules": [{"pattern": r.pattern, "category": r.category, "mode": r.mode} for r in rules]}}
    atomic_write_text(path, yaml.safe_dump(doc, sort_keys=False))


# ====== synthetic stand-in ====== #

_SYNTH_PREFIX = {
    "statistical": "mean",
    "frequency": "fft",
    "covariance": "covmat",
    "eigenvalue": "eigen",
}


def synth_generate(n_per_class: int, d: int, planted_category: str = "covariance",
                   separation: float = 5.0, seed: int = 0):
    """
    Three Gaussian class clusters with unit noise. Class means differ only on
    the planted category's columns: planted column j shifts class (j mod 3)
    by `separation`. Columns are named in the public dataset's style so the
    default rules categorize them.

    :return: (FeatureTable, CategoryMap)
    """
    if d < 8:
        raise DataError(f"d must be >= 8, got {d}")
    if n_per_class < 10:
        raise DataError(f"n_per_class must be >= 10, got {n_per_class}")
    if planted_category not in _SYNTH_PREFIX:
        raise DataError(f"planted category must be one of {sorted(_SYNTH_PREFIX)}, got '{planted_category}'")

    groups = list(_SYNTH_PREFIX)
    sizes = [d // len(groups) + (1 if g < d % len(groups) else 0) for g in range(len(groups))]
    names = []
    categories = []
    for group, size in zip(groups, sizes):
        names.extend(f"{_SYNTH_PREFIX[group]}_{i}_a" for i in range(size))
        categories.extend([group] * size)

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), n_per_class)
    values = rng.normal(0.0, 1.0, size=(labels.size, d))
    planted = [j for j, c in enumerate(categories) if c == planted_category]
    for rank, j in enumerate(planted):
        values[labels == rank % 3, j] += separation

    order = rng.permutation(labels.size)
    table = FeatureTable(values=values[order], feature_names=tuple(names), labels=labels[order])
    return table, CategoryMap(assignment=tuple(categories), feature_names=tuple(names))
