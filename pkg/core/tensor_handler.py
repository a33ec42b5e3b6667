"""
Dense float64 tensors with a recorded graph and reverse-mode gradients.

Every op builds its output with `_make`, handing over a closure that maps the
output gradient to one gradient per parent. `backward` walks the graph once
in reverse topological order. Broadcasting only aligns trailing dimensions:
a shape combines with another iff it equals a suffix of it.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
LN_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Forward passes inside this block record nothing."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
        return out
    out = Tensor(data)
    out.op = op
    return out


# ====== graph traversal ====== #

@dataclass
class Graph:
    nodes: list = field(default_factory=list)
    visits: int = 0


def build_graph(root: Tensor) -> list:
    """Topological order over nodes that require grad, root last."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Graph:
    """
    Fill `.grad` on every reachable tensor. Leaf gradients accumulate across
    calls; interior gradients describe the latest call only.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph(nodes=build_graph(loss))
    if not loss.requires_grad:
        return graph
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        graph.visits += 1
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return graph


# ====== broadcasting ====== #

def broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} are not trailing-aligned")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ====== elementwise ====== #

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    broadcast_shape(a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _backward, "mul")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    # relu'(0) = 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of max(x, floor); zero gradient where the floor applies."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ====== linear algebra ====== #

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    a[..., m, k] @ b[k, n] or a[..., m, k] @ b[..., k, n] with equal batch dims.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands or more, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of x[C_in, L] (or [B, C_in, L]) with kernels[C_out, C_in, K].
    Output length is floor((L + 2*padding - K) / stride) + 1.
    """
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    c_out, c_in, k = kernels.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {xd.shape[1]}")
    length = xd.shape[2]
    if k > length + 2 * padding:
        raise ShapeError(f"kernel size {k} exceeds padded input length {length + 2 * padding}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    out = np.einsum("bclk,ock->bol", windows, kernels.data, optimize=True) + bias.data[None, :, None]

    def _backward(g):
        g = g if batched else g[None]
        gw = np.einsum("bol,bclk->ock", g, windows, optimize=True)
        gb = g.sum(axis=(0, 2))
        gwin = np.einsum("bol,ock->bclk", g, kernels.data, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gwin[:, :, :, j]
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        return (gx if batched else gx[0]), gw, gb

    return _make(out if batched else out[0], (x, kernels, bias), _backward, "conv1d")


# ====== normalization / probability ====== #

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), _backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (population variance), then gain/bias."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _backward(g):
        dxhat = g * gain.data
        gx = inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), _backward, "layer_norm")


def pool_avg_max(x: Tensor) -> Tensor:
    """[T, H] -> [2H] (or [B, T, H] -> [B, 2H]): mean over T, then max over T."""
    if x.shape[-2] < 1:
        raise ShapeError("pool_avg_max needs at least one timestep")
    t = x.shape[-2]
    avg = x.data.mean(axis=-2)
    arg = x.data.argmax(axis=-2)
    peak = np.take_along_axis(x.data, np.expand_dims(arg, -2), axis=-2).squeeze(-2)
    h = x.shape[-1]

    def _backward(g):
        g_avg, g_max = g[..., :h], g[..., h:]
        gx = np.repeat(np.expand_dims(g_avg / t, -2), t, axis=-2)
        # only the first argmax row receives the max-branch gradient
        np.put_along_axis(gx, np.expand_dims(arg, -2),
                          np.take_along_axis(gx, np.expand_dims(arg, -2), axis=-2) + np.expand_dims(g_max, -2),
                          axis=-2)
        return (gx,)

    return _make(np.concatenate([avg, peak], axis=-1), (x,), _backward, "pool_avg_max")


# ====== reductions ====== #

def sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), _backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the first maximal entry takes the gradient."""
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    peak = np.take_along_axis(x.data, arg, axis=axis)

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(peak.squeeze(axis), (x,), _backward, "max")


# ====== structure ====== #

def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def _backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, _backward, "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(x.data[index], (x,), _backward, "slice")


def take(x: Tensor, axis: int, i: int) -> Tensor:
    """Select one position along `axis`, dropping that axis."""
    index = [slice(None)] * x.ndim
    index[axis] = i
    index = tuple(index)

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(x.data[index], (x,), _backward, "take")


# ====== verification ====== #

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    checked: int
    excluded: list = field(default_factory=list)
    worst: tuple = ()


def finite_diff_check(f, params, eps: float = 1e-5, kink_tol: float = 1e-3, floor: float = 1e-4,
                      max_checks=None, seed: int = 0) -> FiniteDiffReport:
    """
    Compare recorded gradients of the scalar f() with central differences.

    A coordinate whose one-sided slopes disagree by more than
    kink_tol * max(1, |central|) sits on a kink (relu at 0, max-pool tie) and
    is excluded. Relative error is |a - n| / max(|a|, |n|, floor).

    :param f: zero-argument callable returning a scalar Tensor built from params
    :param max_checks: sample this many coordinates instead of all of them
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    f0 = loss.item()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(k, i) for k, p in enumerate(params) for i in range(p.size)]
    if max_checks is not None and max_checks < len(coords):
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(coords), size=max_checks, replace=False))
        coords = [coords[j] for j in picks]

    report = FiniteDiffReport(max_rel_err=0.0, checked=0)
    with no_grad():
        for k, i in coords:
            data = params[k].data
            at = np.unravel_index(i, data.shape)
            original = data[at]
            data[at] = original + eps
            fp = f().item()
            data[at] = original - eps
            fm = f().item()
            data[at] = original
            central = (fp - fm) / (2 * eps)
            forward_slope = (fp - f0) / eps
            backward_slope = (f0 - fm) / eps
            if abs(forward_slope - backward_slope) > kink_tol * max(1.0, abs(central)):
                report.excluded.append((k, i))
                continue
            a = analytic[k].reshape(-1)[i]
            rel = abs(a - central) / max(abs(a), abs(central), floor)
            report.checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (params[k].name or k, i, float(a), float(central))
    if report.excluded:
        logger.debug("finite_diff_check excluded %d kink coordinate(s)", len(report.excluded))
    return report
