"""Tape-free reverse-mode autodiff over numpy arrays, plus AdamW.

Every op returns a ``Tensor`` holding references to its parents and a closure
that maps the output gradient to parent gradients. ``backward`` walks the
graph in reverse topological order. Only the handful of ops the decoder
needs are implemented.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ShapeError, StateError

_saved_hooks: list[Callable[["Tensor"], None]] = []


@contextlib.contextmanager
def saved_tensor_hook(fn: Callable[["Tensor"], None]):
    """Call ``fn`` on every intermediate an op keeps alive for backward."""
    _saved_hooks.append(fn)
    try:
        yield
    finally:
        _saved_hooks.remove(fn)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named leaf tensor; only trainable params receive gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(np.array(value), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    @property
    def value(self) -> np.ndarray:
        return self.data

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag
        if not flag:
            self.grad = None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.trainable else None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _retain(*ts: Tensor) -> None:
    if not _saved_hooks:
        return
    for t in ts:
        if not t.is_leaf:
            for h in _saved_hooks:
                h(t)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; python scalars are treated as constants."""
    if not isinstance(b, Tensor):
        c = b

        def bw_const(g):
            return (g * c,)

        return _node(a.data * c, (a,), bw_const)
    a = _t(a)
    if b.requires_grad:
        _retain(a)
    if a.requires_grad:
        _retain(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.requires_grad:
        _retain(a)
    if a.requires_grad:
        _retain(b)

    def bw(g):
        if b.data.ndim == 2:
            ga = g @ b.data.T
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_all(a: Tensor) -> Tensor:
    return _node(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _node(x * sig, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _node(p, (a,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    xd = x.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gg = g * gain.data
        gx = inv * (gg - xhat * np.sum(gg * xhat, axis=-1, keepdims=True) / d)
        ggain = _unbroadcast(g * xhat, gain.shape)
        return gx, ggain

    return _node(xhat * gain.data, (x, gain), bw)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _node(table.data[ids], (table,), bw)


def prefix(a: Tensor, n: int, axis: int = 0) -> Tensor:
    """The first ``n`` entries of ``a`` along ``axis``."""
    index = (slice(None),) * axis + (slice(0, n),)

    def bw(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _node(a.data[index], (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is set."""
    x = logits.data
    targets = np.asarray(targets)
    w = np.asarray(mask, dtype=x.dtype)
    count = w.sum()
    if count == 0:
        raise ValueError("loss mask selects no positions")
    mx = np.max(x, axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.sum(np.exp(x - mx), axis=-1))
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.sum(nll * w) / count

    def bw(g):
        p = np.exp(x - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (w / count * g)[..., None],)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Accumulate d(loss)/d(param) into ``.grad`` of every trainable leaf."""
    if loss.is_leaf or loss._backward is None:
        raise StateError("backward() needs the output of a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError("backward() expects a scalar loss")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if isinstance(node, Param) and not node.trainable:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Param], eps: float = 1e-4,
               samples_per_tensor: int = 64, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Up to ``samples_per_tensor`` coordinates per parameter are drawn with a
    seeded generator (all of them when the tensor is smaller).
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise StateError("loss_fn is not deterministic")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_tensor else rng.choice(n, samples_per_tensor, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(loss_fn().data)
            flat[i] = old - eps
            fm = float(loss_fn().data)
            flat[i] = old
            numeric = (fp - fm) / (2 * eps)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.trainable and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= coef
    return total


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


def adamw_step(params: Iterable[Param], state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update in place (decoupled decay, bias-corrected moments)."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr == 0.0:
            continue
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.05

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_ratio * self.total_steps + 0.5))


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to base_lr, then linear decay to 0."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * step / w
    span = schedule.total_steps - w
    if span <= 0:
        return schedule.base_lr
    return schedule.base_lr * (schedule.total_steps - step) / span
