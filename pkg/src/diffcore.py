"""
Dense-tensor engine with reverse-mode differentiation.

Every operation returns a new Tensor; when gradients are enabled and any input
requires them, the result remembers its parents and a closure mapping the
output gradient to one gradient per parent. `backward` walks the graph once in
reverse topological order and then marks it consumed.
"""

import contextlib
import logging
import threading
from typing import NamedTuple

import numpy as np

from src.errors import ContractError, DimensionError, EmptySupportError, GraphStateError

logger = logging.getLogger(__name__)

_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        """Wrap an op result; `backward_fn(grad)` returns one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)


class LSTMWeights(NamedTuple):
    """Gate-stacked recurrence weights, gate order (input, forget, cell, output)."""

    W: Tensor  # [4n x d_in]
    U: Tensor  # [4n x n]
    b: Tensor  # [4n]


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape):
    return Tensor(np.zeros(shape))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {list(a.shape)} and {list(b.shape)}") from None


# ----------------------------
# Elementwise arithmetic
# ----------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), _backward)


def neg(a):
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0.0):
        raise ContractError("log: input must be strictly positive")
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsum(a):
    return Tensor.from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ----------------------------
# Linear algebra and reshaping
# ----------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    out = a.data @ b.data
    a2 = a.data.reshape(-1, a.shape[-1])
    b2 = b.data.reshape(b.shape[0], -1)

    def _backward(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return Tensor.from_op(np.asarray(out), (a, b), _backward)


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {list(a.shape)}")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def getitem(a, index):
    basic = isinstance(index, (int, np.integer, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, np.integer, slice)) for i in index)
    )

    def _backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return Tensor.from_op(np.array(a.data[index]), (a,), _backward)


def concat(tensors):
    """Join 1-D tensors end to end."""
    if not tensors:
        raise DimensionError("concat: nothing to join")
    for t in tensors:
        if t.data.ndim != 1:
            raise DimensionError(f"concat: expected vectors, got shape {list(t.shape)}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([t.data for t in tensors]), tuple(tensors), _backward)


def stack(tensors):
    """Stack equal-length vectors as matrix rows."""
    if not tensors:
        raise DimensionError("stack: nothing to stack")
    width = tensors[0].shape
    for t in tensors:
        if t.shape != width or t.data.ndim != 1:
            raise DimensionError(f"stack: row shapes differ, {list(width)} vs {list(t.shape)}")

    def _backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return Tensor.from_op(np.stack([t.data for t in tensors]), tuple(tensors), _backward)


# ----------------------------
# Normalized distributions and recurrences
# ----------------------------


def masked_softmax(logits, mask):
    """Softmax restricted to `mask`; masked entries are exactly zero."""
    support = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 1 or support.shape != logits.shape:
        raise DimensionError(f"masked_softmax: logits {list(logits.shape)} vs mask of length {support.size}")
    if not support.any():
        raise EmptySupportError("masked_softmax: mask has no true entry")
    z = logits.data[support]
    e = np.exp(z - z.max())
    out = np.zeros_like(logits.data)
    out[support] = e / e.sum()

    def _backward(g):
        grad = np.zeros_like(out)
        p = out[support]
        gs = g[support]
        grad[support] = p * (gs - np.dot(gs, p))
        return (grad,)

    return Tensor.from_op(out, (logits,), _backward)


def lstm_step(x, h, c, weights):
    """One gated recurrence step: returns (h', c')."""
    n = h.shape[0]
    d_in = x.shape[0]
    W, U, b = weights
    if W.shape != (4 * n, d_in) or U.shape != (4 * n, n) or b.shape != (4 * n,) or c.shape != (n,):
        raise DimensionError(
            f"lstm_step: W {list(W.shape)}, U {list(U.shape)}, b {list(b.shape)} "
            f"do not fit input {d_in} and hidden {n}"
        )
    z = matmul(W, x) + matmul(U, h) + b
    i = sigmoid(z[0:n])
    f = sigmoid(z[n : 2 * n])
    g = tanh(z[2 * n : 3 * n])
    o = sigmoid(z[3 * n : 4 * n])
    c_next = f * c + i * g
    h_next = o * tanh(c_next)
    return h_next, c_next


# ----------------------------
# Reverse pass
# ----------------------------


def _topological_order(root):
    order = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._consumed:
            raise GraphStateError("backward: graph was already consumed by an earlier backward pass")
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` on every requires_grad tensor reachable from a scalar loss."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    if loss._consumed:
        raise GraphStateError("backward: loss graph was already consumed")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._backward = None
            node._parents = ()
    logger.debug(f"backward visited {len(order)} nodes")
