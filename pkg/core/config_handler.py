"""
Run configuration: built-in defaults, optionally the `--fast` profile, then a
YAML file, then command-line overrides. Every section is a frozen dataclass;
unknown keys and invalid values raise ConfigError naming the dotted key path.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from core.data_handler import DEFAULT_CATEGORY, LABEL_COLUMN, DataError, rules_from_records
from core.model_handler import ConvBlockSpec, ModelSpec, is_valid_model_spec
from core.train_handler import TrainSpec, is_valid_train_spec
from core.utils import atomic_write_text

logger = logging.getLogger(__name__)

PROFILES = ("full", "fast")
ROSTER = ("rf", "et", "mlp", "standard", "enhanced")
NEURAL_MODELS = ("mlp", "standard", "enhanced")
EXPLAIN_MODELS = ("rf", "et", "enhanced")

FAST_PROFILE = {
    "model": {
        "conv_blocks": [
            {"channels": 16, "kernel": 5, "stride": 1, "residual": False},
            {"channels": 32, "kernel": 3, "stride": 1, "residual": True},
            {"channels": 32, "kernel": 3, "stride": 1, "residual": True},
        ],
        # 2 x 32 attended width keeps 4 dims per stage-1 head
        "lstm_hidden": 32,
        "heads_stage1": 16,
        "heads_stage2": 8,
        "dense_sizes": [64, 32],
        "dropout": 0.1,
    },
    # patience equal to the epoch count: fast runs never stop early
    "train": {"epochs": 50, "patience": 50},
    "forest": {"n_trees": 50},
    "importance": {"shap_samples": 50, "shap_permutations": 16},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str = None
    label_column: str = LABEL_COLUMN
    test_fraction: float = 0.2


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    noise_sigma: float = 0.05
    scale_lo: float = 0.9
    scale_hi: float = 1.1


@dataclass(frozen=True)
class CategoriesConfig:
    rules: tuple = None
    rules_file: str = None
    default: str = DEFAULT_CATEGORY


@dataclass(frozen=True)
class ModelConfig:
    seq_reshape: tuple = None
    conv_blocks: tuple = tuple(asdict(b) for b in ModelSpec().conv_blocks)
    lstm_hidden: int = 128
    lstm_layers: int = 2
    # null drops the first attention stage
    heads_stage1: int = field(default=16, metadata={"nullable": True})
    heads_stage2: int = 8
    dense_sizes: tuple = (512, 256, 128)
    dropout: float = 0.3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    patience: int = 30
    validation: str = "holdout"
    inner_val_fraction: float = 0.2


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: str = "sqrt"
    max_depth: int = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    n_jobs: int = 1


@dataclass(frozen=True)
class ImportanceConfig:
    mi_bins: int = 10
    top_k: int = 15
    correlation_top_k: int = 30
    shap_samples: int = 500
    shap_permutations: int = 100
    shap_top: int = 20
    explain_model: str = "rf"


@dataclass(frozen=True)
class ExperimentConfig:
    roster: tuple = ROSTER
    folds: int = 5
    ablation_runs: int = 3
    ablation_model: str = "enhanced"
    bootstrap_resamples: int = 1000
    ci_level: float = 0.95
    n_jobs: int = 1


@dataclass(frozen=True)
class CliConfig:
    seed: int = None
    profile: str = "full"
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    categories: CategoriesConfig = field(default_factory=CategoriesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


SECTIONS = {f.name: f.type for f in fields(CliConfig) if f.name not in ("seed", "profile")}


# ====== merging ====== #

def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def dotted_to_nested(overrides: dict) -> dict:
    """{"train.epochs": 5} -> {"train": {"epochs": 5}}"""
    nested = {}
    for key, value in overrides.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def read_yaml(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


# ====== typed construction ====== #

def _coerce(value, kind, default, path: str, nullable: bool = False):
    if value is None:
        if default is None or nullable:
            return None
        raise ConfigError(f"{path}: must not be null")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, (str, int)) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return str(value)
    if kind is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(dict(v) if isinstance(v, dict) else v for v in value)
    return value


def _section(cls, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    values = {}
    for name, f in known.items():
        if name in doc:
            values[name] = _coerce(doc[name], f.type, f.default, f"{path}.{name}", f.metadata.get("nullable", False))
    return cls(**values)


def build_config(doc: dict) -> "CliConfig":
    for key in doc:
        if key not in SECTIONS and key not in ("seed", "profile"):
            raise ConfigError(f"{key}: unknown key")
    sections = {name: _section(cls, doc.get(name), name) for name, cls in SECTIONS.items()}
    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    config = CliConfig(seed=seed, profile=doc.get("profile", "full"), **sections)
    ok, msg = is_valid_config(config)
    if not ok:
        raise ConfigError(msg)
    return config


def load_config(path=None, overrides: dict = None, fast: bool = False) -> CliConfig:
    """
    :param overrides: dotted key -> value, applied last (None values are skipped)
    :param fast: force the desk-scale profile
    """
    file_doc = read_yaml(path) if path else {}
    flag_doc = dotted_to_nested({k: v for k, v in (overrides or {}).items() if v is not None})
    profile = "fast" if fast else flag_doc.get("profile", file_doc.get("profile", "full"))
    if profile not in PROFILES:
        raise ConfigError(f"profile: must be one of {PROFILES}, got {profile!r}")
    doc = {"profile": profile}
    if profile == "fast":
        doc = _deep_merge(doc, FAST_PROFILE)
    doc = _deep_merge(doc, file_doc)
    doc = _deep_merge(doc, flag_doc)
    doc["profile"] = profile
    config = build_config(doc)
    logger.debug("resolved config: %s", config_to_dict(config))
    return config


# ====== validation ====== #

def is_valid_config(config: CliConfig):
    """
    :return: tuple (bool, str) - (valid, message naming the key path)
    """
    if config.profile not in PROFILES:
        return False, f"profile: must be one of {PROFILES}"
    if not 0.0 < config.data.test_fraction < 1.0:
        return False, f"data.test_fraction: must be in (0, 1), got {config.data.test_fraction}"
    if config.augment.noise_sigma < 0:
        return False, "augment.noise_sigma: must be >= 0"
    if config.augment.scale_lo > config.augment.scale_hi:
        return False, "augment.scale_lo: must not exceed augment.scale_hi"
    if config.categories.rules is not None:
        try:
            rules_from_records(config.categories.rules)
        except DataError as e:
            return False, str(e)
    try:
        blocks = tuple(ConvBlockSpec(**b) for b in config.model.conv_blocks)
    except TypeError as e:
        return False, f"model.conv_blocks: {e}"
    if config.model.seq_reshape is not None and len(config.model.seq_reshape) != 2:
        return False, "model.seq_reshape: expected [timesteps, channels]"
    reshape = config.model.seq_reshape
    input_dim = reshape[0] * reshape[1] if reshape is not None else ModelSpec().input_dim
    ok, msg = is_valid_model_spec(replace(model_spec(config, input_dim), conv_blocks=blocks))
    if not ok:
        return False, f"model: {msg}"
    ok, msg = is_valid_train_spec(train_spec(config, 0))
    if not ok:
        return False, f"train: {msg}"
    if config.forest.n_trees < 1:
        return False, "forest.n_trees: must be >= 1"
    if config.forest.max_features not in ("sqrt", "log2", "all"):
        return False, "forest.max_features: must be sqrt, log2 or all"
    imp = config.importance
    if imp.mi_bins < 2:
        return False, "importance.mi_bins: must be >= 2"
    for key in ("top_k", "correlation_top_k", "shap_samples", "shap_permutations", "shap_top"):
        if getattr(imp, key) < 1:
            return False, f"importance.{key}: must be >= 1"
    if imp.explain_model not in EXPLAIN_MODELS:
        return False, f"importance.explain_model: must be one of {EXPLAIN_MODELS}"
    exp = config.experiment
    unknown = [m for m in exp.roster if m not in ROSTER]
    if unknown or not exp.roster or len(set(exp.roster)) != len(exp.roster):
        return False, f"experiment.roster: models must be distinct entries of {ROSTER}"
    if exp.folds < 2:
        return False, "experiment.folds: must be >= 2"
    if exp.ablation_runs < 1:
        return False, "experiment.ablation_runs: must be >= 1"
    if exp.ablation_model not in ROSTER:
        return False, f"experiment.ablation_model: must be one of {ROSTER}"
    if exp.bootstrap_resamples < 1:
        return False, "experiment.bootstrap_resamples: must be >= 1"
    if not 0.0 < exp.ci_level < 1.0:
        return False, "experiment.ci_level: must be in (0, 1)"
    return True, "ok"


# ====== views ====== #

def model_spec(config: CliConfig, input_dim: int) -> ModelSpec:
    m = config.model
    return ModelSpec(
        input_dim=input_dim,
        seq_reshape=tuple(m.seq_reshape) if m.seq_reshape is not None else None,
        conv_blocks=tuple(ConvBlockSpec(**b) for b in m.conv_blocks),
        lstm_hidden=m.lstm_hidden,
        lstm_layers=m.lstm_layers,
        heads_stage1=m.heads_stage1,
        heads_stage2=m.heads_stage2,
        dense_sizes=tuple(m.dense_sizes),
        dropout=m.dropout,
    )


def train_spec(config: CliConfig, seed: int) -> TrainSpec:
    t, a = config.train, config.augment
    return TrainSpec(
        epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lr_min=t.lr_min, warmup_epochs=t.warmup_epochs,
        weight_decay=t.weight_decay, label_smoothing=t.label_smoothing, clip_norm=t.clip_norm,
        patience=t.patience, seed=seed, augment=a.enabled, noise_sigma=a.noise_sigma,
        scale_lo=a.scale_lo, scale_hi=a.scale_hi, validation=t.validation,
        inner_val_fraction=t.inner_val_fraction,
    )


def forest_kwargs(config: CliConfig) -> dict:
    f = config.forest
    return {
        "max_features": None if f.max_features == "all" else f.max_features,
        "max_depth": f.max_depth,
        "min_samples_split": f.min_samples_split,
        "min_samples_leaf": f.min_samples_leaf,
        "n_jobs": f.n_jobs,
    }


def with_seed(config: CliConfig, seed) -> CliConfig:
    return config if seed is None else replace(config, seed=seed)


def require_seed(config: CliConfig) -> int:
    if config.seed is None:
        raise ConfigError("seed: required (pass --seed or set `seed` in the config file)")
    return config.seed


def config_to_dict(config: CliConfig) -> dict:
    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return plain(asdict(config))


def dump_config(config: CliConfig, path):
    atomic_write_text(Path(path), yaml.safe_dump(config_to_dict(config), sort_keys=False))
