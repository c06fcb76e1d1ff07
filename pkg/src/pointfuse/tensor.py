"""Reverse-mode automatic differentiation over float64 numpy arrays.

The computation record is rebuilt on every forward pass: each operation
produces a fresh Tensor holding its inputs' backward rule as a closure.
Calling backward() walks the record once in reverse topological order and
releases it as it goes, so records are single-use and peak memory stays
near the forward footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError, StateError

_grad_enabled = True


class no_grad:
    """Context manager that suspends recording of backward rules."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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
        if isinstance(other, Tensor):
            raise InvalidInputError("division by a Tensor is not supported; use mul")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """A named leaf tensor that always participates in gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # Never accumulate in place: incoming arrays may be shared between
    # recipients (identity-passing rules) or be broadcast views.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a_data, b_data = a.data, b.data

    def rule(g):
        _accum(a, _unbroadcast(g * b_data, a_data.shape))
        _accum(b, _unbroadcast(g * a_data, b_data.shape))

    return _make(a_data * b_data, (a, b), rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        _accum(a, g @ b_data.T)
        _accum(b, a_data.T @ g)

    return _make(a_data @ b_data, (a, b), rule)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")

    def rule(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), rule)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def rule(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    basic = _is_basic_index(key)

    def rule(g):
        gz = np.zeros(shape, dtype=np.float64)
        if basic:
            gz[key] += g
        else:
            np.add.at(gz, key, g)
        _accum(a, gz)

    return _make(a.data[key], (a,), rule)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def rule(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), rule)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def rule(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), rule)


def log(a) -> Tensor:
    a = as_tensor(a)
    a_data = a.data

    def rule(g):
        _accum(a, g / a_data)

    return _make(np.log(a_data), (a,), rule)


def power(a, exponent: int) -> Tensor:
    """Elementwise integer power, exponent >= 1."""
    a = as_tensor(a)
    if not isinstance(exponent, (int, np.integer)) or exponent < 1:
        raise InvalidInputError(f"power expects an integer exponent >= 1, got {exponent}")
    k = int(exponent)
    a_data = a.data

    def rule(g):
        _accum(a, g * (k * a_data ** (k - 1)))

    return _make(a_data**k, (a,), rule)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def rule(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(total))


def _extreme_over_axis(a, axis: int, keepdims: bool, argfn, redfn) -> Tensor:
    a = as_tensor(a)
    idx = argfn(a.data, axis=axis)
    shape = a.data.shape

    def rule(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        gz = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(gz, np.expand_dims(idx, axis), gg, axis=axis)
        _accum(a, gz)

    return _make(redfn(a.data, axis=axis, keepdims=keepdims), (a,), rule)


def max_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties route the gradient to the lowest index."""
    return _extreme_over_axis(a, axis, keepdims, np.argmax, np.max)


def min_over_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Minimum along one axis; ties route the gradient to the lowest index."""
    return _extreme_over_axis(a, axis, keepdims, np.argmin, np.min)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Rows scaled to unit Euclidean length along `axis`.

    Zero-length rows are the caller's job to screen out; they raise here.
    """
    a = as_tensor(a)
    norms = np.linalg.norm(a.data, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidInputError("cannot l2-normalize a zero vector")
    out_data = a.data / norms

    def rule(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, (g - out_data * inner) / norms)

    return _make(out_data, (a,), rule)


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects matching 1-D tensors, got {a.shape} and {b.shape}")
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, params=None):
    """Populate gradients of everything reachable from a scalar loss.

    When `params` is given, their gradients are freshly computed for this
    call: parameters the record never reaches end up with zero-filled grads
    rather than stale ones.  The record is released as it is consumed, so a
    graph can only be walked once.
    """
    if loss.data.shape != ():
        raise InvalidInputError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if params is not None:
        params = list(params)
        for p in params:
            p.grad = None

    if loss.requires_grad:
        topo = []
        seen = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            rule = node._backward
            if rule is not None:
                if node.grad is not None:
                    rule(node.grad)
                node.grad = None  # interior value; leaves keep theirs
                node._backward = None
            node._parents = ()

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(params, lr: float = 1e-2):
    """One plain gradient-descent update; requires fresh gradients."""
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {getattr(p, 'name', '?')!r} has no gradient")
        p.data = p.data - lr * p.grad


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter identity."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params,
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update with bias correction.

    Per-parameter updates touch only that parameter's own state, so results
    do not depend on iteration order.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {getattr(p, 'name', '?')!r} has no gradient")
    state.t += 1
    b1t = 1.0 - beta1**state.t
    b2t = 1.0 - beta2**state.t
    for p in params:
        key = id(p)
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[key] = m
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / b1t) / (np.sqrt(v / b2t) + eps)


class SGD:
    def __init__(self, params, lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        sgd_step(self.params, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
