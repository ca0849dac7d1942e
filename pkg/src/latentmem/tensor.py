"""Dense float64 tensors with reverse-mode differentiation.

Every real-valued quantity in the model lives in a :class:`Tensor`.  Operations
record a closure that maps the output gradient onto the inputs; :func:`backward`
walks the recorded graph once in reverse topological order.

Leaf tensors with ``requires_grad`` accumulate into ``.grad`` across calls, so
callers reset explicitly (see :func:`zero_grad`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- graph traversal ------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node._backward(g, grads)


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        _accum(grads, a, _unbroadcast(g, a.shape))
        _accum(grads, b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g, grads):
        _accum(grads, a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(grads, b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g, grads):
        _accum(grads, a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g, grads):
        _accum(grads, a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g, grads):
        _accum(grads, a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g, grads):
        _accum(grads, a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g, grads):
        _accum(grads, a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g, grads):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(grads, a, g * local)

    return _make(out, (a,), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            _accum(grads, b, _unbroadcast(g * ~pick_a, b.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g, grads):
        _accum(grads, a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


# -- reductions and shape -------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(grads, a, np.broadcast_to(g, a.shape).copy())

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g, grads):
        _accum(grads, a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g, grads):
        _accum(grads, a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with ``np.add.at``."""
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not Tensors")

    def bw(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(grads, a, full)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, grads):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(grads, t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g, grads):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(grads, t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be 2-D and shared."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(grads, b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


# -- normalisation and probabilities -------------------------------------

def softmax_masked(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` after adding ``mask`` (0 or -inf entries).

    Masked positions come out exactly 0.  A row with every entry masked is
    an input error.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if m.shape[-2:] != x.shape[-2:] and m.shape[-1:] != x.shape[-1:]:
            raise ShapeError(f"softmax_masked: mask {m.shape} vs logits {x.shape}")
        x = x + m
    top = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("softmax_masked: a row has every position masked")
    e = np.exp(x - top)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        _accum(grads, logits, out * (g - dot))

    return _make(out, (logits,), bw)


def log_softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        x = x + (mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64))
    top = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("log_softmax: a row has every position masked")
    shifted = x - top
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g, grads):
        gs = np.where(np.isfinite(out), g, 0.0)
        _accum(grads, logits, gs - probs * gs.sum(axis=axis, keepdims=True))

    return _make(out, (logits,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def bw(g, grads):
        if gamma.requires_grad:
            _accum(grads, gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(grads, beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(grads, x, gx)

    return _make(out, (x, gamma, beta), bw)
