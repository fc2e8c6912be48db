"""Small reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray``.  Every op returns a new tensor that
remembers its parents and a closure mapping the output gradient to parent
gradients.  ``Tensor.backward`` walks the graph in reverse topological order
and accumulates ``.grad`` on leaves that have ``requires_grad`` set.

Intermediate nodes do not keep their gradients; only leaves do.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class InputTooShortError(ValueError):
    """Temporal input shorter than the kernel span."""


class OptimizerStateError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result.  ``backward(g)`` returns one gradient (or None) per parent."""
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    on = x.data > 0
    return make_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * on,))


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so each direction is a single GEMM
        a2 = a.data.reshape(-1, a.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_op((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# normalisation / probabilities -------------------------------------------------

def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_op(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(xhat * gain.data + bias.data, (x, gain, bias), backward)


# sequence ops ------------------------------------------------------------------

def conv1d_time(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid temporal convolution.

    ``x`` is ``[..., T, n]`` and ``kernel`` is ``[k, n, n_out]``; the result is
    ``[..., (T - k) // stride + 1, n_out]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, n_in, n_out = kernel.shape
    T = x.shape[-2]
    if x.shape[-1] != n_in:
        raise ShapeError(f"conv1d_time: input has {x.shape[-1]} features, kernel expects {n_in}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if T < k:
        raise InputTooShortError(f"input length {T} is shorter than kernel size {k}")
    T_out = (T - k) // stride + 1
    span = stride * (T_out - 1) + 1
    cols = np.concatenate([x.data[..., j:j + span:stride, :] for j in range(k)], axis=-1)
    w2 = kernel.data.reshape(k * n_in, n_out)

    def backward(g):
        gk = None
        if kernel.requires_grad:
            gk = (cols.reshape(-1, k * n_in).T @ g.reshape(-1, n_out)).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = g @ w2.T
            gx = np.zeros(x.shape)
            for j in range(k):
                gx[..., j:j + span:stride, :] += gcols[..., j * n_in:(j + 1) * n_in]
        return gx, gk

    return make_op(cols @ w2, (x, kernel), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention, ``softmax(q kᵀ / √d) v``.

    ``mask`` is ``None``, ``"causal"`` or a boolean array broadcastable to
    ``[..., Tq, Tk]`` where True marks an allowed key.  Disallowed scores are
    set to -inf before the softmax, so every query needs one allowed key.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        if isinstance(mask, str):
            if mask != "causal":
                raise ValueError(f"unknown mask kind {mask!r}")
            mask = causal_mask(q.shape[-2], k.shape[-2])
        scores = np.where(mask, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(gs @ k.data, q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.swapaxes(gs, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        gv = _unbroadcast(np.swapaxes(probs, -1, -2) @ g, v.shape) if v.requires_grad else None
        return gq, gk, gv

    return make_op(probs @ v.data, (q, k, v), backward)


def causal_mask(tq: int, tk: int | None = None) -> np.ndarray:
    tk = tq if tk is None else tk
    return np.tril(np.ones((tq, tk), dtype=bool))


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_op(table.data[ids], (table,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index[...]]`` along the last axis (one entry per row)."""
    index = np.asarray(index, dtype=np.int64)[..., None]

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, index, g[..., None], axis=-1)
        return (gx,)

    return make_op(np.take_along_axis(x.data, index, axis=-1)[..., 0], (x,), backward)


# parameters / optimisation -----------------------------------------------------

def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
                 name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


def constant(value: float, shape: Sequence[int], name: str | None = None) -> Tensor:
    return Tensor(np.full(tuple(shape), value), requires_grad=True, name=name)


@dataclass
class Optimizer:
    """SGD with momentum or Adam, with optional L2 weight decay added to the gradient."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def step(self, params: Iterable[Tensor]) -> None:
        params = list(params)
        for i, p in enumerate(params):
            if p.grad is None:
                raise OptimizerStateError(f"parameter {p.name or i} has no gradient")
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.kind == "sgd-momentum":
                vel = self.state.get(i)
                vel = g.copy() if vel is None else self.momentum * vel + g
                self.state[i] = vel
                p.data -= self.learning_rate * vel
            else:
                if i not in self.state:
                    self.state[i] = (np.zeros_like(p.data), np.zeros_like(p.data))
                m, v = self.state[i]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * (g * g)
                step = self.learning_rate / (1 - self.beta1 ** t)
                p.data -= step * m / (np.sqrt(v / (1 - self.beta2 ** t)) + self.epsilon)


def optimizer_step(opt: Optimizer, params: Iterable[Tensor]) -> None:
    opt.step(params)
