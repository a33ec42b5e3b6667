"""
Training loop for the hybrid and dense classifiers: label-smoothed cross
entropy, AdamW with decoupled weight decay, cosine schedule with linear
warmup, global-norm clipping, early stopping on validation loss.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import core.tensor_handler as T
from core import checkpoint_handler
from core.data_handler import DataError, apply_normalizer, augment, fit_normalizer, stratified_split
from core.model_handler import MLPSpec
from core.tensor_handler import Tensor, backward
from core.utils import atomic_write_text, derive_seeds

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
VALIDATION_MODES = ("holdout", "inner")
EVAL_BATCH = 256


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    patience: int = 30
    seed: int = 0
    augment: bool = True
    noise_sigma: float = 0.05
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    validation: str = "holdout"
    inner_val_fraction: float = 0.2


def is_valid_train_spec(spec: TrainSpec):
    """
    :return: tuple (bool, str) - (valid, reason)
    """
    if spec.epochs < 1:
        return False, f"epochs must be >= 1, got {spec.epochs}"
    if spec.batch_size < 1:
        return False, f"batch_size must be >= 1, got {spec.batch_size}"
    if not 0.0 <= spec.label_smoothing < 1.0:
        return False, f"label_smoothing must be in [0, 1), got {spec.label_smoothing}"
    if spec.clip_norm <= 0:
        return False, f"clip_norm must be > 0, got {spec.clip_norm}"
    if spec.patience < 1:
        return False, f"patience must be >= 1, got {spec.patience}"
    if spec.lr <= 0 or spec.lr_min < 0 or spec.lr_min > spec.lr:
        return False, f"need 0 <= lr_min <= lr and lr > 0, got lr={spec.lr}, lr_min={spec.lr_min}"
    if spec.warmup_epochs < 0:
        return False, f"warmup_epochs must be >= 0, got {spec.warmup_epochs}"
    if spec.weight_decay < 0:
        return False, f"weight_decay must be >= 0, got {spec.weight_decay}"
    if spec.validation not in VALIDATION_MODES:
        return False, f"validation must be one of {VALIDATION_MODES}, got '{spec.validation}'"
    if not 0.0 < spec.inner_val_fraction < 1.0:
        return False, f"inner_val_fraction must be in (0, 1), got {spec.inner_val_fraction}"
    return True, "ok"


def mlp_baseline_spec(input_dim: int = 988) -> MLPSpec:
    """Dense input_dim -> 256 -> 128 -> 3 network with ReLU."""
    return MLPSpec(input_dim=input_dim, hidden=(256, 128), classes=3, dropout=0.0)


# ====== loss ====== #

def smoothed_targets(labels, classes: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((labels.size, classes), smoothing / classes)
    q[np.arange(labels.size), labels] += 1.0 - smoothing
    return q


def label_smoothed_ce(probs: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """
    -mean_b sum_c q_bc log p_bc with q = (1 - smoothing) * onehot + smoothing / C.
    log is floored at 1e-12.
    """
    q = smoothed_targets(labels, probs.shape[-1], smoothing)
    per_row = T.sum(T.mul(T.log(probs), q), axis=-1)
    return T.neg(T.mean(per_row))


def _ce_values(probs: np.ndarray, labels, smoothing: float) -> np.ndarray:
    q = smoothed_targets(labels, probs.shape[-1], smoothing)
    return -(q * np.log(np.maximum(probs, T.LOG_FLOOR))).sum(axis=-1)


# ====== schedule ====== #

def cosine_lr(epoch: int, cycle: int, lr_max: float, lr_min: float, warmup: int = 0) -> float:
    """
    Linear ramp to lr_max over `warmup` epochs, then cosine annealing over
    `cycle` epochs; lr_min past the end of the cycle.
    """
    if cycle < 1:
        raise ValueError(f"cycle must be >= 1, got {cycle}")
    if epoch < warmup:
        return lr_max * (epoch + 1) / warmup
    t_cur = epoch - warmup
    if t_cur >= cycle:
        return lr_min
    # t_cur = 0 gives lr_max exactly
    return lr_max - 0.5 * (lr_max - lr_min) * (1.0 - math.cos(math.pi * t_cur / cycle))


# ====== optimizer ====== #

@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params) -> "AdamWState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adamw_step(params, grads, state: AdamWState, lr: float, weight_decay: float):
    """
    In-place AdamW update of `params` (arrays or Tensors).

    w <- w - lr * weight_decay * w - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        w = p.data if isinstance(p, Tensor) else p
        if g.shape != w.shape or m.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {w.shape}")
        w -= lr * weight_decay * w
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads, max_norm: float = 1.0) -> list:
    """Rescale all gradients jointly so their global l2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    # multiply before dividing; [3, 4] must clip to exactly [0.6, 0.8]
    return [g * max_norm / norm for g in grads]


# ====== trace ====== #

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    @property
    def gap(self) -> float:
        return self.train_acc - self.val_acc


TRACE_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "gap")


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch]

    def to_frame(self) -> pd.DataFrame:
        rows = [[getattr(r, c) for c in TRACE_COLUMNS] for r in self.epochs]
        return pd.DataFrame(rows, columns=list(TRACE_COLUMNS))

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "epochs": [{c: getattr(r, c) for c in TRACE_COLUMNS} for r in self.epochs],
        }


def write_trace_csv(trace: TrainTrace, path):
    atomic_write_text(path, trace.to_frame().to_csv(index=False, float_format="%.10g", lineterminator="\n"))


@dataclass
class TrainResult:
    model: object
    normalizer: object
    trace: TrainTrace

    def predict_proba(self, raw_rows) -> np.ndarray:
        return self.model.predict_proba(apply_normalizer(self.normalizer, raw_rows))

    def predict(self, raw_rows) -> np.ndarray:
        return np.argmax(self.predict_proba(raw_rows), axis=1)


# ====== loop ====== #

def evaluate(model, rows, labels, smoothing: float = 0.1):
    """
    Eval-mode loss and accuracy on already-normalized rows.

    :return: (mean smoothed cross entropy, accuracy)
    """
    probs = model.predict_proba(rows, batch_size=EVAL_BATCH)
    labels = np.asarray(labels, dtype=np.int64)
    loss = float(_ce_values(probs, labels, smoothing).mean())
    acc = float(np.mean(np.argmax(probs, axis=1) == labels))
    return loss, acc


def inner_validation_split(x, y, spec: TrainSpec):
    """Carve a stratified validation split out of the training rows."""
    split = stratified_split(y, spec.inner_val_fraction, spec.seed)
    return x[split.train_idx], y[split.train_idx], x[split.test_idx], y[split.test_idx]


def train(model, x_train, y_train, x_val, y_val, spec: TrainSpec, checkpoint_path=None) -> TrainResult:
    """
    Fit `model` in place and restore the parameters of the epoch with the
    lowest validation loss.

    :param model: HybridClassifier or MLPClassifier
    :param x_train: raw (unnormalized) training rows; the normalizer is fit on them
    :param checkpoint_path: rewritten on every validation-loss improvement
    """
    ok, msg = is_valid_train_spec(spec)
    if not ok:
        raise ValueError(msg)
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise DataError("training and validation sets must be non-empty")

    normalizer = fit_normalizer(x_train, np.arange(x_train.shape[0]))
    xt = apply_normalizer(normalizer, x_train)
    xv = apply_normalizer(normalizer, x_val)

    shuffle_seed, augment_seed, dropout_seed = derive_seeds(spec.seed, 3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    augment_rng = np.random.default_rng(augment_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    params = model.params.values()
    state = AdamWState.for_params(params)
    cycle = max(1, spec.epochs - spec.warmup_epochs)
    trace = TrainTrace()
    best_loss = math.inf
    best_params = model.params.snapshot()
    waited = 0
    n = xt.shape[0]

    for epoch in range(spec.epochs):
        lr = cosine_lr(epoch, cycle, spec.lr, spec.lr_min, spec.warmup_epochs)
        order = shuffle_rng.permutation(n)
        for batch_no, start in enumerate(range(0, n, spec.batch_size)):
            idx = order[start:start + spec.batch_size]
            xb = xt[idx]
            if spec.augment:
                xb = augment(xb, spec.noise_sigma, spec.scale_lo, spec.scale_hi, seed=augment_rng)
            model.params.zero_grad()
            probs = model.forward(xb, training=True, rng=dropout_rng)
            loss = label_smoothed_ce(probs, y_train[idx], spec.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {batch_no}")
            backward(loss)
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            grads = clip_gradients(grads, spec.clip_norm)
            adamw_step(params, grads, state, lr, spec.weight_decay)
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch_no, value)

        train_loss, train_acc = evaluate(model, xt, y_train, spec.label_smoothing)
        val_loss, val_acc = evaluate(model, xv, y_val, spec.label_smoothing)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        trace.epochs.append(EpochRecord(epoch, lr, train_loss, train_acc, val_loss, val_acc))
        logger.info("epoch %d lr %.2e train %.4f/%.4f val %.4f/%.4f",
                    epoch, lr, train_loss, train_acc, val_loss, val_acc)

        if val_loss < best_loss:
            best_loss = val_loss
            trace.best_epoch = epoch
            best_params = model.params.snapshot()
            waited = 0
            if checkpoint_path is not None:
                checkpoint_handler.save(checkpoint_path, model, normalizer)
        else:
            waited += 1
            if waited >= spec.patience:
                trace.stop_reason = "early_stopping"
                break
    else:
        trace.stop_reason = "max_epochs"

    model.params.load(best_params)
    logger.info("best epoch %d (val loss %.4f), stopped: %s", trace.best_epoch, best_loss, trace.stop_reason)
    return TrainResult(model=model, normalizer=normalizer, trace=trace)
