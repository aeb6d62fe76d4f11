"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradient recording is on and
any input requires a gradient, remembers the op that produced it.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``d loss / d leaf`` into every leaf that
has ``requires_grad=True``.  Leaf gradients accumulate across calls until
:meth:`Tensor.zero_grad` is called.

The op set is just what the encoder, its losses and the mask-sensitivity
scores need; several ops (softmax, layer norm, cross entropy) are fused so
their local gradients are exact closed forms.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "count_ops",
    "OpCounter",
    "tensor",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy_logits",
    "mse",
    "embedding",
    "dropout",
    "gelu",
    "grad_check",
]


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_GRAD_ENABLED = True
_COUNTERS: list["OpCounter"] = []


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class OpCounter:
    """Tally of op invocations and matmul floating point operations."""

    def __init__(self):
        self.ops: Counter = Counter()
        self.matmul_flops = 0

    def record(self, name: str, flops: int = 0):
        self.ops[name] += 1
        self.matmul_flops += flops


@contextlib.contextmanager
def count_ops():
    """Count every op executed in the block.

    >>> with count_ops() as c:
    ...     _ = tensor(np.eye(2)) @ tensor(np.eye(2))
    >>> c.ops["matmul"], c.matmul_flops
    (1, 16)
    """
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_retain")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this (intermediate) node after backward."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(values, parents: tuple, backward: Callable, op: str, flops: int = 0) -> "Tensor":
        if not np.all(np.isfinite(values)):
            raise NumericError(f"non-finite values produced by {op}")
        for c in _COUNTERS:
            c.record(op, flops)
        out = Tensor(values)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.values)
        order = self._topo_order()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node.is_leaf:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NumericError("non-finite gradient")

    def _topo_order(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
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

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.values + other.values, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.values, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.values - other.values, (self, other), bw, "sub")

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.values, other.values

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.values, other.values

        def bw(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), bw, "div")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.values[index], (self,), bw, "getitem")

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.values.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.values.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int):
        return Tensor._make(
            np.swapaxes(self.values, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes"
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.values.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.values.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- nonlinearities -----------------------------------------------------
    def exp(self):
        y = np.exp(self.values)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.values
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x)
        return Tensor._make(y, (self,), lambda g: (g / x,), "log")

    def tanh(self):
        y = np.tanh(self.values)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def relu(self):
        x = self.values
        return Tensor._make(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),), "relu")

    def gelu(self):
        return gelu(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv
    flops = 2 * out.size * av.shape[-1]

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul", flops)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.values
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (t,), bw, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.values
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (t,), bw, "log_softmax")


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply ``gain * x_hat + bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gain, bias = _lift(gain), _lift(bias)
    x = t.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def bw(g):
        gx = None
        if t.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gv.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.values.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._make(xhat * gv + bias.values, (t, gain, bias), bw, "layer_norm")


def cross_entropy_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy of ``logits[batch, classes]`` against integer labels.

    ``reduction`` is ``"mean"`` (default), ``"sum"`` or ``"none"`` (per-sample).
    """
    z = logits.values
    if z.ndim != 2:
        raise ValueError("logits must be batch x classes")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ValueError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("label out of range")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    per = -logp[rows, labels]
    p = np.exp(logp)
    p[rows, labels] -= 1.0
    batch = z.shape[0]

    if reduction == "none":
        return Tensor._make(per, (logits,), lambda g: (p * g[:, None],), "cross_entropy")
    if reduction == "sum":
        return Tensor._make(per.sum(), (logits,), lambda g: (p * g,), "cross_entropy")
    if reduction == "mean":
        return Tensor._make(per.mean(), (logits,), lambda g: (p * (g / batch),), "cross_entropy")
    raise ValueError(f"unknown reduction {reduction!r}")


def mse(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Mean (or summed / per-row) squared error."""
    pred = _lift(pred)
    target = np.asarray(target.values if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.values - target
    n = diff.size
    if reduction == "mean":
        return Tensor._make(np.mean(diff * diff), (pred,), lambda g: (2.0 * diff * g / n,), "mse")
    if reduction == "sum":
        return Tensor._make(np.sum(diff * diff), (pred,), lambda g: (2.0 * diff * g,), "mse")
    if reduction == "none":
        axes = tuple(range(1, diff.ndim))
        per = (diff * diff).sum(axis=axes) if axes else diff * diff

        def bw(g):
            return (2.0 * diff * g.reshape(g.shape + (1,) * len(axes)),)

        return Tensor._make(per, (pred,), bw, "mse")
    raise ValueError(f"unknown reduction {reduction!r}")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return Tensor._make(table.values[ids], (table,), bw, "embedding")


def dropout(t: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return Tensor._make(t.values * keep, (t,), lambda g: (g * keep,), "dropout")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(t: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = t.values
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return Tensor._make(y, (t,), bw, "gelu")


def grad_check(function: Callable[[], Tensor], parameters: Sequence[Tensor], step: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``function`` is called with no arguments and must read the current values
    of ``parameters`` (which are perturbed in place).  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_coords`` set,
    each parameter is checked at that many randomly chosen coordinates instead
    of all of them.
    """
    params = list(parameters)
    for p in params:
        p.zero_grad()
    loss = function()
    if loss.values.size != 1:
        raise ValueError("function must return a scalar")
    loss.backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    with no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad
            flat = p.values.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = function().item()
                flat[i] = orig - step
                down = function().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                if not np.isfinite(numeric):
                    raise NumericError("non-finite finite-difference estimate")
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
