"""Dense tensors with reverse-mode automatic differentiation and an Adam optimizer.

Every differentiable primitive records a :class:`Node` on its output holding the
inputs and whatever the gradient rule needs.  Gradient rules live in the
module-level ``GRAD_RULES`` registry keyed by primitive name, so a rule can be
looked up (or swapped out in a test) without touching the forward code.

Values are 64-bit floats by default; finite-difference checks are only
meaningful at that precision.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import (
    DegenerateBatchError,
    DeterminismError,
    DimensionError,
    OptimizerError,
    ParameterError,
    ShapeError,
    VocabularyError,
)

DEFAULT_DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Node:
    """One recorded primitive: its name, its input tensors and saved context."""

    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], saved: dict | None = None):
        self.op = op
        self.inputs = inputs
        self.saved = saved or {}

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={[t.shape for t in self.inputs]})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @classmethod
    def parameter(cls, data, name: str | None = None) -> "Tensor":
        return cls(np.ascontiguousarray(np.array(data, dtype=DEFAULT_DTYPE)), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


GradRule = Callable[[Node, np.ndarray], tuple]
GRAD_RULES: dict[str, GradRule] = {}


def grad_rule(op: str):
    def register(fn: GradRule) -> GradRule:
        GRAD_RULES[op] = fn
        return fn

    return register


def _record(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out.node = Node(op, inputs, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} is invalid for a tensor of rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, "add", (a, b))


@grad_rule("add")
def _add_grad(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, "sub", (a, b))


@grad_rule("sub")
def _sub_grad(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, "mul", (a, b))


@grad_rule("mul")
def _mul_grad(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data / b.data, "div", (a, b))


@grad_rule("div")
def _div_grad(node, g):
    a, b = node.inputs
    return (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, "neg", (a,))


@grad_rule("neg")
def _neg_grad(node, g):
    return (-g,)


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data**exponent, "power", (a,), exponent=float(exponent))


@grad_rule("power")
def _power_grad(node, g):
    (a,) = node.inputs
    p = node.saved["exponent"]
    return (g * p * a.data ** (p - 1.0),)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), out=out)


@grad_rule("exp")
def _exp_grad(node, g):
    return (g * node.saved["out"],)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), "log", (a,))


@grad_rule("log")
def _log_grad(node, g):
    return (g / node.inputs[0].data,)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(np.maximum(a.data, 0.0), "relu", (a,))


@grad_rule("relu")
def _relu_grad(node, g):
    return (g * (node.inputs[0].data > 0),)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # exp of a non-positive argument only, so neither branch overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record(out, "sigmoid", (a,), out=out)


@grad_rule("sigmoid")
def _sigmoid_grad(node, g):
    y = node.saved["out"]
    return (g * y * (1.0 - y),)


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    return _record(np.clip(a.data, low, high), "clip", (a,), low=low, high=high)


@grad_rule("clip")
def _clip_grad(node, g):
    x = node.inputs[0].data
    inside = (x >= node.saved["low"]) & (x <= node.saved["high"])
    return (g * inside,)


def masked_fill(a: ArrayLike, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; ``keep`` broadcasts."""
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    return _record(np.where(keep, a.data, value), "masked_fill", (a,), keep=keep)


@grad_rule("masked_fill")
def _masked_fill_grad(node, g):
    (a,) = node.inputs
    return (_unbroadcast(np.where(node.saved["keep"], g, 0.0), a.shape),)


# ---------------------------------------------------------------- reductions and shape


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), axis=axis, keepdims=keepdims)


@grad_rule("sum")
def _sum_grad(node, g):
    (a,) = node.inputs
    axis, keepdims = node.saved["axis"], node.saved["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def tmax(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        _check_axis(axis, a.ndim)
    return _record(a.data.max(axis=axis, keepdims=keepdims), "max", (a,), axis=axis, keepdims=keepdims)


@grad_rule("max")
def _max_grad(node, g):
    (a,) = node.inputs
    axis, keepdims = node.saved["axis"], node.saved["keepdims"]
    x = a.data
    if axis is None:
        out = np.zeros_like(x)
        out.reshape(-1)[np.argmax(x)] = g.reshape(-1)[0]
        return (out,)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    if not keepdims:
        g = np.expand_dims(g, axis)
    out = np.zeros_like(x)
    np.put_along_axis(out, idx, g, axis=axis)
    return (out,)


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), "reshape", (a,))


@grad_rule("reshape")
def _reshape_grad(node, g):
    return (g.reshape(node.inputs[0].shape),)


def transpose(a: ArrayLike, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _record(a.data.transpose(axes), "transpose", (a,), axes=tuple(axes))


@grad_rule("transpose")
def _transpose_grad(node, g):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _record(np.matmul(a.data, b.data), "matmul", (a, b))


@grad_rule("matmul")
def _matmul_grad(node, g):
    a, b = node.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


# ---------------------------------------------------------------- normalizations


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, "softmax", (a,), out=out, axis=axis)


@grad_rule("softmax")
def _softmax_grad(node, g):
    y, axis = node.saved["out"], node.saved["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record(out, "log_softmax", (a,), out=out, axis=axis)


@grad_rule("log_softmax")
def _log_softmax_grad(node, g):
    out, axis = node.saved["out"], node.saved["axis"]
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t.shape not in ((d,), ()):
            raise DimensionError(f"{label} shape {t.shape} does not match normalized axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data
    return _record(out, "layer_norm", (x, gamma, beta), xhat=xhat, inv_std=inv_std)


@grad_rule("layer_norm")
def _layer_norm_grad(node, g):
    x, gamma, beta = node.inputs
    xhat, inv_std = node.saved["xhat"], node.saved["inv_std"]
    dxhat = g * gamma.data
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)


# ---------------------------------------------------------------- lookups and losses


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` may have any integer shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise VocabularyError(f"token id {int(ids[bad].reshape(-1)[0])} outside vocabulary of size {vocab}")
    return _record(table.data[ids], "embedding_lookup", (table,), ids=ids)


@grad_rule("embedding_lookup")
def _embedding_grad(node, g):
    (table,) = node.inputs
    out = np.zeros_like(table.data)
    np.add.at(out, node.saved["ids"].reshape(-1), g.reshape(-1, table.shape[-1]))
    return (out,)


def sparse_categorical_cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    valid = targets != pad_id
    bad = valid & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise VocabularyError(f"target id {int(targets[bad][0])} outside vocabulary of size {vocab}")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count
    return _record(
        np.asarray(loss), "cross_entropy", (logits,), logp=logp, safe=safe, valid=valid, count=count
    )


cross_entropy = sparse_categorical_cross_entropy


@grad_rule("cross_entropy")
def _cross_entropy_grad(node, g):
    s = node.saved
    grad = np.exp(s["logp"])
    np.put_along_axis(
        grad, s["safe"][..., None], np.take_along_axis(grad, s["safe"][..., None], axis=-1) - 1.0, axis=-1
    )
    grad *= (s["valid"] / s["count"])[..., None]
    return (grad * g,)


# ---------------------------------------------------------------- graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through recorded nodes, inputs first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def graph_nodes(root: Tensor) -> list[Node]:
    """The recorded computation graph behind ``root`` in topological order."""
    return [t.node for t in topological_order(root) if t.node is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, ig in zip(t.node.inputs, GRAD_RULES[t.node.op](t.node, g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = ig if key not in grads else grads[key] + ig


# ---------------------------------------------------------------- verification


def _as_param_list(params) -> list[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    if isinstance(params, Tensor):
        return [params]
    return list(params)


def finite_difference_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is evaluated with no arguments and must read ``params`` (which are
    perturbed in place, one coordinate at a time).  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ParameterError(f"finite-difference eps must lie in [1e-8, 1e-3], got {eps}")
    tensors = _as_param_list(params)
    for p in tensors:
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise DeterminismError("two evaluations of f at the same parameters differ")
    backward(loss)
    worst = 0.0
    for p in tensors:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            with no_grad():
                plus = float(f().data)
            flat[i] = original - eps
            with no_grad():
                minus = float(f().data)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_grad_norm: float | None = None
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def zero_grad(params: Mapping[str, Tensor] | Iterable[Tensor]) -> None:
    for p in _as_param_list(params):
        p.zero_grad()


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; clears every gradient afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise OptimizerError(f"gradient of {name!r} has shape {p.grad.shape}, expected {p.shape}")
    scale = 1.0
    if state.max_grad_norm is not None:
        total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values())))
        if total > state.max_grad_norm:
            scale = state.max_grad_norm / (total + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if scale == 1.0 else p.grad * scale
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.grad = None
