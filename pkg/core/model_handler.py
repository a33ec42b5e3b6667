"""
Enhanced Transformer-CNN-BiLSTM classifier and the dense baseline, built
from core.tensor_handler primitives.

Pipeline: reshape row -> (T, C) sequence, conv blocks (residual where
flagged), stacked BiLSTM, attention stage 1 (optional) and stage 2 each with
residual add + layer norm, avg/max pooling, dense head with dropout, softmax.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

import core.tensor_handler as T
from core.tensor_handler import Tensor, no_grad

logger = logging.getLogger(__name__)

# sequence reshape searches channel counts in this range
RESHAPE_CHANNELS = range(8, 17)
FORGET_BIAS = 1.0


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ConvBlockSpec:
    channels: int
    kernel: int
    stride: int = 1
    residual: bool = False


DEFAULT_CONV_BLOCKS = (
    ConvBlockSpec(64, 5, 1, False),
    ConvBlockSpec(128, 3, 1, True),
    ConvBlockSpec(128, 3, 1, True),
)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 988
    seq_reshape: tuple = None
    conv_blocks: tuple = DEFAULT_CONV_BLOCKS
    lstm_hidden: int = 128
    lstm_layers: int = 2
    heads_stage1: int = 16
    heads_stage2: int = 8
    dense_sizes: tuple = (512, 256, 128)
    dropout: float = 0.3
    classes: int = 3

    @property
    def attended_width(self) -> int:
        return 2 * self.lstm_hidden


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int = 988
    hidden: tuple = (256, 128)
    classes: int = 3
    dropout: float = 0.0


def infer_seq_reshape(d: int) -> tuple:
    """
    (T, C) for a flat row of width d: C in [8, 16] with the least zero
    padding, smallest C on ties. 988 -> (76, 13).
    """
    best = min(RESHAPE_CHANNELS, key=lambda c: (math.ceil(d / c) * c - d, c))
    return math.ceil(d / best), best


def resolved_reshape(spec: ModelSpec) -> tuple:
    return tuple(spec.seq_reshape) if spec.seq_reshape else infer_seq_reshape(spec.input_dim)


def conv_output_length(length: int, block: ConvBlockSpec) -> int:
    pad = (block.kernel - 1) // 2
    return (length + 2 * pad - block.kernel) // block.stride + 1


def is_valid_model_spec(spec: ModelSpec):
    """
    :return: tuple (bool, str) - (valid, reason)
    """
    if spec.input_dim < 1:
        return False, f"input_dim must be positive, got {spec.input_dim}"
    steps, channels = resolved_reshape(spec)
    if steps * channels < spec.input_dim:
        return False, f"seq_reshape {steps}x{channels} cannot hold {spec.input_dim} features"
    length = steps
    for i, block in enumerate(spec.conv_blocks):
        if block.channels < 1 or block.kernel < 1 or block.stride < 1:
            return False, f"conv block {i}: channels, kernel and stride must be positive"
        pad = (block.kernel - 1) // 2
        if block.kernel > length + 2 * pad:
            return False, f"conv block {i}: kernel {block.kernel} exceeds padded length {length + 2 * pad}"
        length = conv_output_length(length, block)
    if spec.lstm_layers < 1 or spec.lstm_hidden < 1:
        return False, "lstm_layers and lstm_hidden must be positive"
    width = spec.attended_width
    for stage, heads in (("heads_stage1", spec.heads_stage1), ("heads_stage2", spec.heads_stage2)):
        if heads is None and stage == "heads_stage1":
            continue
        if heads is None or heads < 1:
            return False, f"{stage} must be a positive integer"
        if width % heads:
            return False, f"{stage}={heads} does not divide the attended width {width}"
    if not 0.0 <= spec.dropout < 1.0:
        return False, f"dropout must be in [0, 1), got {spec.dropout}"
    if spec.classes < 2:
        return False, f"classes must be >= 2, got {spec.classes}"
    if any(s < 1 for s in spec.dense_sizes):
        return False, "dense_sizes must be positive"
    return True, "ok"


def standard_spec(enhanced: ModelSpec) -> ModelSpec:
    """Plain hybrid: no residuals, no 16-head stage, one BiLSTM layer."""
    return replace(
        enhanced,
        conv_blocks=tuple(replace(b, residual=False) for b in enhanced.conv_blocks),
        heads_stage1=None,
        lstm_layers=1,
    )


def spec_to_dict(spec) -> dict:
    return asdict(spec)


def spec_from_dict(doc: dict):
    if "hidden" in doc:
        return MLPSpec(**{**doc, "hidden": tuple(doc["hidden"])})
    blocks = tuple(ConvBlockSpec(**b) for b in doc.get("conv_blocks", ()))
    fields = {**doc, "conv_blocks": blocks, "dense_sizes": tuple(doc.get("dense_sizes", ()))}
    if fields.get("seq_reshape") is not None:
        fields["seq_reshape"] = tuple(fields["seq_reshape"])
    return ModelSpec(**fields)


# ====== parameters ====== #

class ModelParams:
    """Ordered name -> Tensor mapping."""

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ModelSpecError(f"duplicate parameter name '{name}'")
        tensor.name = name
        tensor.requires_grad = True
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return list(self._tensors.values())

    def names(self) -> list:
        return list(self._tensors)

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())

    def load(self, arrays):
        for name, t in self._tensors.items():
            if name not in arrays:
                raise ModelSpecError(f"missing parameter '{name}'")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ModelSpecError(f"parameter '{name}' has shape {arr.shape}, expected {t.shape}")
            t.data = arr.copy()


def count_parameters(params: ModelParams) -> int:
    return int(sum(t.size for t in params.values()))


def _uniform(rng, shape, fan_in):
    # variance 1 / fan_in
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _add_dense(params, rng, prefix, n_in, n_out):
    params.add(f"{prefix}.weight", _uniform(rng, (n_in, n_out), n_in))
    params.add(f"{prefix}.bias", Tensor(np.zeros(n_out)))


def _add_lstm_direction(params, rng, prefix, n_in, hidden):
    params.add(f"{prefix}.w_xh", _uniform(rng, (n_in, 4 * hidden), n_in))
    params.add(f"{prefix}.w_hh", _uniform(rng, (hidden, 4 * hidden), hidden))
    bias = np.zeros(4 * hidden)
    # gate order i, f, g, o
    bias[hidden:2 * hidden] = FORGET_BIAS
    params.add(f"{prefix}.b", Tensor(bias))


def _add_attention(params, rng, prefix, width):
    for proj in ("q", "k", "v", "o"):
        _add_dense(params, rng, f"{prefix}.{proj}", width, width)
    params.add(f"{prefix}.ln.gain", Tensor(np.ones(width)))
    params.add(f"{prefix}.ln.bias", Tensor(np.zeros(width)))


def build(spec: ModelSpec, seed: int) -> ModelParams:
    ok, msg = is_valid_model_spec(spec)
    if not ok:
        raise ModelSpecError(msg)
    rng = np.random.default_rng(seed)
    params = ModelParams()

    _, channels = resolved_reshape(spec)
    for i, block in enumerate(spec.conv_blocks):
        params.add(f"conv{i}.weight", _uniform(rng, (block.channels, channels, block.kernel), channels * block.kernel))
        params.add(f"conv{i}.bias", Tensor(np.zeros(block.channels)))
        if block.residual and (channels != block.channels or block.stride != 1):
            params.add(f"conv{i}.proj.weight", _uniform(rng, (block.channels, channels, 1), channels))
            params.add(f"conv{i}.proj.bias", Tensor(np.zeros(block.channels)))
        channels = block.channels

    width = channels
    for layer in range(spec.lstm_layers):
        for direction in ("fwd", "bwd"):
            _add_lstm_direction(params, rng, f"lstm{layer}.{direction}", width, spec.lstm_hidden)
        width = 2 * spec.lstm_hidden

    if spec.heads_stage1 is not None:
        _add_attention(params, rng, "attn1", width)
    _add_attention(params, rng, "attn2", width)

    width = 2 * width
    for i, size in enumerate(spec.dense_sizes):
        _add_dense(params, rng, f"dense{i}", width, size)
        width = size
    _add_dense(params, rng, "out", width, spec.classes)
    return params


def build_mlp(spec: MLPSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    params = ModelParams()
    width = spec.input_dim
    for i, size in enumerate(spec.hidden):
        _add_dense(params, rng, f"dense{i}", width, size)
        width = size
    _add_dense(params, rng, "out", width, spec.classes)
    return params


# ====== layers ====== #

def dense(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def residual_block(x: Tensor, params: ModelParams, prefix: str, block: ConvBlockSpec) -> Tensor:
    """
    x[B, C_in, L] -> relu(conv(x)), plus the (projected) input when the block
    is residual. With zero conv weights a residual block is the identity.
    """
    pad = (block.kernel - 1) // 2
    f = T.relu(T.conv1d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], block.stride, pad))
    if not block.residual:
        return f
    if f"{prefix}.proj.weight" in params:
        shortcut = T.conv1d(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], block.stride, 0)
    else:
        shortcut = x
    return shortcut + f


def _lstm_direction(seq: Tensor, params: ModelParams, prefix: str, reverse: bool) -> list:
    w_hh = params[f"{prefix}.w_hh"]
    hidden = w_hh.shape[0]
    batch, steps = seq.shape[0], seq.shape[1]
    xz = T.matmul(seq, params[f"{prefix}.w_xh"]) + params[f"{prefix}.b"]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = T.take(xz, 1, t) + T.matmul(h, w_hh)
        i = T.sigmoid(T.slice_axis(z, -1, 0, hidden))
        f = T.sigmoid(T.slice_axis(z, -1, hidden, 2 * hidden))
        g = T.tanh(T.slice_axis(z, -1, 2 * hidden, 3 * hidden))
        o = T.sigmoid(T.slice_axis(z, -1, 3 * hidden, 4 * hidden))
        c = f * c + i * g
        h = o * T.tanh(c)
        outputs[t] = h
    return outputs


def bilstm_forward(seq: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """seq[T, F] or [B, T, F] -> [.., T, 2H]: forward and backward states concatenated per step."""
    single = seq.ndim == 2
    if single:
        seq = T.reshape(seq, (1,) + seq.shape)
    fwd = T.stack(_lstm_direction(seq, params, f"{prefix}.fwd", reverse=False), axis=1)
    bwd = T.stack(_lstm_direction(seq, params, f"{prefix}.bwd", reverse=True), axis=1)
    out = T.concat([fwd, bwd], axis=-1)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def multi_head_attention(x: Tensor, heads: int, params: ModelParams, prefix: str):
    """
    Scaled dot-product self-attention over x[T, M] or [B, T, M].

    :return: (output Tensor shaped like x, attention weights [B, heads, T, T])
    """
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    batch, steps, width = x.shape
    if width % heads:
        raise ModelSpecError(f"{heads} heads do not divide width {width}")
    d_k = width // heads

    def split(proj):
        y = dense(x, params, f"{prefix}.{proj}")
        return T.transpose(T.reshape(y, (batch, steps, heads, d_k)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    weights = T.softmax(scores, axis=-1)
    merged = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (batch, steps, width))
    out = dense(merged, params, f"{prefix}.o")
    if single:
        out = T.reshape(out, (steps, width))
    return out, weights.data


def attention_block(x: Tensor, heads: int, params: ModelParams, prefix: str, dropout: float = 0.0, rng=None):
    """Post-norm residual: dropout(layer_norm(x + mha(x)))."""
    attended, weights = multi_head_attention(x, heads, params, prefix)
    normed = T.layer_norm(x + attended, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])
    return T.dropout(normed, dropout, rng), weights


def _as_rows(rows) -> Tensor:
    return rows if isinstance(rows, Tensor) else Tensor(np.atleast_2d(np.asarray(rows, dtype=np.float64)))


def forward(params: ModelParams, spec: ModelSpec, rows, training: bool = False, rng=None,
            capture_attention: bool = False):
    """
    Class probabilities [B, classes]. Dropout is active only when training
    and an rng is supplied.

    :return: probabilities, or (probabilities, {"attn1": w, "attn2": w}) with capture_attention
    """
    x = _as_rows(rows)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelSpecError(f"expected rows of width {spec.input_dim}, got shape {x.shape}")
    rate = spec.dropout if training else 0.0
    steps, channels = resolved_reshape(spec)
    batch = x.shape[0]

    padding = steps * channels - spec.input_dim
    if padding:
        x = T.concat([x, Tensor(np.zeros((batch, padding)))], axis=1)
    h = T.transpose(T.reshape(x, (batch, steps, channels)), (0, 2, 1))
    for i, block in enumerate(spec.conv_blocks):
        h = residual_block(h, params, f"conv{i}", block)
    h = T.transpose(h, (0, 2, 1))

    for layer in range(spec.lstm_layers):
        h = bilstm_forward(h, params, f"lstm{layer}")

    captured = {}
    if spec.heads_stage1 is not None:
        h, captured["attn1"] = attention_block(h, spec.heads_stage1, params, "attn1", rate, rng)
    h, captured["attn2"] = attention_block(h, spec.heads_stage2, params, "attn2", rate, rng)

    h = T.pool_avg_max(h)
    for i in range(len(spec.dense_sizes)):
        h = T.dropout(T.relu(dense(h, params, f"dense{i}")), rate, rng)
    probs = T.softmax(dense(h, params, "out"), axis=-1)
    if capture_attention:
        return probs, captured
    return probs


def mlp_forward(params: ModelParams, spec: MLPSpec, rows, training: bool = False, rng=None) -> Tensor:
    x = _as_rows(rows)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelSpecError(f"expected rows of width {spec.input_dim}, got shape {x.shape}")
    rate = spec.dropout if training else 0.0
    h = x
    for i in range(len(spec.hidden)):
        h = T.dropout(T.relu(dense(h, params, f"dense{i}")), rate, rng)
    return T.softmax(dense(h, params, "out"), axis=-1)


# ====== classifiers ====== #

@dataclass
class HybridClassifier:
    spec: ModelSpec
    seed: int
    kind: str = "enhanced"
    params: ModelParams = field(default=None, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = build(self.spec, self.seed)

    def forward(self, rows, training=False, rng=None, capture_attention=False):
        return forward(self.params, self.spec, rows, training, rng, capture_attention)

    def predict_proba(self, rows, batch_size: int = 256) -> np.ndarray:
        return _predict_in_batches(self, rows, batch_size)

    def attention_maps(self, rows) -> dict:
        with no_grad():
            _, captured = self.forward(rows, capture_attention=True)
        return captured


@dataclass
class MLPClassifier:
    spec: MLPSpec
    seed: int
    kind: str = "mlp"
    params: ModelParams = field(default=None, repr=False)

    def __post_init__(self):
        if self.params is None:
            self.params = build_mlp(self.spec, self.seed)

    def forward(self, rows, training=False, rng=None):
        return mlp_forward(self.params, self.spec, rows, training, rng)

    def predict_proba(self, rows, batch_size: int = 1024) -> np.ndarray:
        return _predict_in_batches(self, rows, batch_size)


def _predict_in_batches(model, rows, batch_size) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    out = []
    with no_grad():
        for start in range(0, rows.shape[0], batch_size):
            out.append(model.forward(rows[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def make_classifier(kind: str, spec, seed: int):
    if kind == "mlp":
        return MLPClassifier(spec=spec, seed=seed)
    if kind in ("enhanced", "standard"):
        return HybridClassifier(spec=spec, seed=seed, kind=kind)
    raise ModelSpecError(f"unknown neural model kind '{kind}'")
