"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the innermost active :class:`Tape` (define-by-run).
Outside of a tape, or when no input requires a gradient, operations are plain
numpy evaluations and nothing is recorded.

Every primitive accepts optional leading batch dimensions, so a layer can be
evaluated for one sample or for a whole minibatch through the same code path.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError, NumericalError, StateError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax", "linear")
LOG_EPS = 1e-12

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value in tensor{' ' + name if name else ''} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Used as a context manager; every operation evaluated inside the block whose
    inputs require gradients is appended in evaluation order, which is already a
    topological order. A tape can be consumed by exactly one backward pass.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise StateError("tape already consumed; run a new forward pass")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        return backward(loss, self)

    def __len__(self):
        return len(self.nodes)


@contextmanager
def no_grad():
    """Suspend recording on any enclosing tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss, tape):
    """Propagate d(loss)/d(.) through ``tape``.

    Leaf tensors with ``requires_grad`` get their ``grad`` accumulated (summed
    with any existing value). Returns ``{leaf: gradient}`` for this pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise StateError("tape already consumed; run a new forward pass before backward")
    tape.consumed = True
    if not loss.requires_grad:
        return {}

    produced = set()
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, _, _ in tape.nodes:
        produced.add(id(out))
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    result = {}
    for key, leaf in leaves.items():
        g = np.array(grads[key], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for tensor {leaf.name or leaf.shape}")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    tape.nodes = []
    return result


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    p = float(exponent)
    return _result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a, eps=LOG_EPS):
    """Natural log of ``max(a, eps)``; the clamp has zero gradient."""
    clamped = np.maximum(a.data, eps)
    live = a.data >= eps
    return _result(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


# ---------------------------------------------------------------- structure


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), fn)


def transpose(a, axes=None):
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), fn)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a, index):
    out = np.array(a.data[index])
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)

    def fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), fn)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), fn)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- activations


def relu(x):
    live = x.data > 0
    return _result(np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def apply_activation(x, kind, axis=-1):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis=axis)
    if kind == "linear":
        return x
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------- layers' primitives


def conv1d_causal(x, filters):
    """Causal 1-D convolution of ``x[..., C_in, T]`` with ``filters[C_out, S, C_in]``.

    The input is left-padded with ``S - 1`` zeros so the output keeps length T and
    ``out[..., o, t] = sum_{s, c} filters[o, s, c] * x[..., c, t + s - (S - 1)]``.
    """
    if x.ndim < 2 or filters.ndim != 3:
        raise DimensionError(f"conv1d_causal expects x[..., C_in, T] and filters[C_out, S, C_in], got {x.shape}, {filters.shape}")
    *lead, c_in, t_len = x.shape
    c_out, size, c_in_f = filters.shape
    if c_in != c_in_f:
        raise DimensionError(f"conv1d_causal channel mismatch: input {x.shape} has {c_in} channels, filters {filters.shape} expect {c_in_f}")
    if size < 1:
        raise DimensionError("kernel size must be >= 1")
    pad = np.zeros((*lead, c_in, size - 1))
    xp = np.concatenate([pad, x.data], axis=-1)
    # cols[..., t, s, c] = xp[..., c, t + s]
    cols = np.swapaxes(sliding_window_view(xp, size, axis=-1), -3, -2)
    cols = np.swapaxes(cols, -1, -2).reshape(*lead, t_len, size * c_in)
    wflat = filters.data.reshape(c_out, size * c_in)
    out = np.swapaxes(cols @ wflat.T, -1, -2)

    def fn(g):
        gt = np.swapaxes(g, -1, -2)  # [..., T, C_out]
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, size * c_in)).reshape(filters.shape)
        gcols = (gt @ wflat).reshape(*lead, t_len, size, c_in)
        gxp = np.zeros(xp.shape)
        for s in range(size):
            gxp[..., s : s + t_len] += np.swapaxes(gcols[..., s, :], -1, -2)
        return gxp[..., size - 1 :], gw

    return _result(out, (x, filters), fn)


def maxpool1d(x, size):
    """Non-overlapping max pooling over the last axis; ties route to the first index."""
    size = int(size)
    if size < 1:
        raise ConfigurationError("pool size must be >= 1")
    t_len = x.shape[-1]
    if t_len < size:
        raise DimensionError(f"maxpool1d: length {t_len} shorter than pool size {size}")
    n = t_len // size
    windows = x.data[..., : n * size].reshape(*x.shape[:-1], n, size)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        full = np.zeros(x.shape)
        full[..., : n * size] = gw.reshape(*x.shape[:-1], n * size)
        return (full,)

    return _result(out, (x,), fn)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- gradient check


def finite_difference_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps=1e-5, floor=1e-6):
    """Max elementwise relative error between tape gradients and central differences.

    ``f`` is called as ``f(*xs)`` and must return a scalar tensor. The relative
    error of an entry is ``|a - n| / max(|a|, |n|, floor)`` so that entries whose
    true gradient is zero are compared on an absolute scale.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = f(*xs)
        backward(loss, tape)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad for t in xs]
        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = f(*xs).item()
                    flat[i] = orig - eps
                    down = f(*xs).item()
                    flat[i] = orig
                    num = (up - down) / (2.0 * eps)
                    ana = a.reshape(-1)[i]
                    err = abs(ana - num) / max(abs(ana), abs(num), floor)
                    worst = max(worst, err)
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
    return worst
