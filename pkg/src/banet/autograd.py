"""Reverse-mode differentiation over the kernels in :mod:`banet.tensor`.

A :class:`Node` records its forward value, its parents and a closure that maps
the upstream gradient to one gradient per parent. :func:`backward` walks the
graph once in reverse topological order and *adds* into the ``grad`` of every
leaf created with ``requires_grad=True``; interior gradients are recomputed on
every call, so running it twice on the same graph doubles the leaf gradients.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as K
from .tensor import InvalidArgument

# per thread, so concurrent inference under no_grad cannot disable taping elsewhere
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a tape."""
    prev, _STATE.enabled = grad_enabled(), False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "requires_grad", "op", "name")

    def __init__(self, value: np.ndarray, parents: Sequence["Node"] = (),
                 backward_fn: Callable | None = None, op: str = "leaf",
                 requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self.grad = np.zeros_like(value) if (requires_grad and not parents) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # arithmetic sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def parameter(value, name: str | None = None) -> Node:
    return Node(np.ascontiguousarray(value), requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(np.asarray(value))


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, op, requires_grad=True)
    return Node(value, op=op)


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, leaves: Iterable[Node] | None = None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the list of gradients for `leaves` when given (zero for leaves the
    loss does not depend on).
    """
    if loss.value.size != 1:
        raise InvalidArgument(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if leaves is not None:
        return [leaf.grad for leaf in leaves]
    return None


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, reduced back on the way down)
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _make(out, (a, b), bw, "div")


def scale(a: Node, s: float) -> Node:
    return _make((a.value * s).astype(a.value.dtype), (a,), lambda g: (g * s,), "scale")


def hadamard(a: Node, b: Node) -> Node:
    """Elementwise product of two identically shaped tensors."""
    value = K.hadamard(a.value, b.value)
    return _make(value, (a, b), lambda g: (g * b.value, g * a.value), "hadamard")


def add_same(a: Node, b: Node) -> Node:
    """Addition without broadcasting."""
    return _make(K.add(a.value, b.value), (a, b), lambda g: (g, g), "add")


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    value = np.asarray(a.value.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.value.dtype),)
    return _make(value, (a,), bw, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

def reshape(a: Node, shape) -> Node:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Node], axis: int = 1) -> Node:
    value = K.concat([x.value for x in xs], axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, range(lo, hi), axis=axis))
                     for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _make(value, tuple(xs), bw, "concat")


def nchw_to_tokens(x: Node) -> Node:
    _, _, h, w = x.shape
    return _make(K.nchw_to_tokens(x.value), (x,),
                 lambda g: (K.tokens_to_nchw(g, h, w),), "nchw_to_tokens")


def tokens_to_nchw(t: Node, h: int, w: int) -> Node:
    return _make(K.tokens_to_nchw(t.value, h, w), (t,),
                 lambda g: (K.nchw_to_tokens(g),), "tokens_to_nchw")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def conv2d(x: Node, weight: Node, bias: Node | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Node:
    value = K.conv2d(x.value, weight.value, None if bias is None else bias.value,
                     stride, padding, groups)

    def bw(g):
        gx, gw, gb = K.conv2d_backward(g, x.value, weight.value, stride, padding, groups)
        return (gx, gw) if bias is None else (gx, gw, gb)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(value, parents, bw, "conv2d")


def batch_norm(x: Node, gamma: Node, beta: Node, running_mean: np.ndarray,
               running_var: np.ndarray, eps: float = K.DEFAULT_EPS,
               training: bool = False, momentum: float = K.BN_MOMENTUM):
    """Returns ``(node, new_running_mean, new_running_var)``."""
    y, rm, rv = K.batch_norm(x.value, gamma.value, beta.value, running_mean, running_var,
                             eps, training, momentum)

    def bw(g):
        return K.batch_norm_backward(g, x.value, gamma.value, running_mean, running_var,
                                     eps, training)
    return _make(y, (x, gamma, beta), bw, "batch_norm"), rm, rv


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = K.DEFAULT_EPS) -> Node:
    return _make(K.layer_norm(x.value, gamma.value, beta.value, eps), (x, gamma, beta),
                 lambda g: K.layer_norm_backward(g, x.value, gamma.value, eps), "layer_norm")


def instance_norm(x: Node, eps: float = K.DEFAULT_EPS) -> Node:
    return _make(K.instance_norm(x.value, eps), (x,),
                 lambda g: (K.instance_norm_backward(g, x.value, eps),), "instance_norm")


def softmax(x: Node, axis: int = -1) -> Node:
    y = K.softmax(x.value, axis)
    return _make(y, (x,), lambda g: (K.softmax_backward(g, y, axis),), "softmax")


_KINK_LOG: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU input evaluated inside the block.

    Finite-difference checks use it to spot steps that cross a kink.
    """
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def relu(x: Node) -> Node:
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(x.value > 0).tobytes())
    return _make(K.relu(x.value), (x,), lambda g: (K.relu_backward(g, x.value),), "relu")


def sigmoid(x: Node) -> Node:
    y = K.sigmoid(x.value)
    return _make(y, (x,), lambda g: (K.sigmoid_backward(g, y),), "sigmoid")


def gelu(x: Node) -> Node:
    return _make(K.gelu(x.value), (x,), lambda g: (K.gelu_backward(g, x.value),), "gelu")


def matmul(a: Node, b: Node) -> Node:
    return _make(K.matmul(a.value, b.value), (a, b),
                 lambda g: K.matmul_backward(g, a.value, b.value), "matmul")


def upsample(x: Node, factor: int, mode: str = "nearest") -> Node:
    return _make(K.upsample(x.value, factor, mode), (x,),
                 lambda g: (K.upsample_backward(g, factor, mode),), f"upsample_{mode}")


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x [..., in] @ weight[out, in].T + bias[out]."""
    if x.shape[-1] != weight.shape[1]:
        raise InvalidArgument(f"linear: input features {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    wv = weight.value
    value = np.matmul(x.value, wv.T)
    if bias is not None:
        value = value + bias.value

    def bw(g):
        gx = np.matmul(g, wv)
        gw = np.tensordot(g, x.value, axes=(list(range(g.ndim - 1)), list(range(g.ndim - 1))))
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(value, dtype=x.value.dtype), parents, bw, "linear")


def l2_normalize(x: Node, axis: int, eps: float = 1e-8) -> Node:
    """x / sqrt(sum(x**2, axis) + eps)."""
    xv = x.value
    norm = np.sqrt((xv.astype(np.float64) ** 2).sum(axis=axis, keepdims=True) + eps)
    y = (xv / norm).astype(xv.dtype)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm).astype(xv.dtype),
    return _make(y, (x,), bw, "l2_normalize")


def cross_entropy(logits: Node, labels: np.ndarray, ignore_label: int | None = None) -> Node:
    """Mean pixel-wise negative log-likelihood over non-ignored pixels.

    `logits` is [N, K, H, W]; `labels` is an integer map [N, H, W]. Returns a
    scalar node; with every pixel ignored the loss is 0 and so is its gradient.
    """
    z = logits.value
    if z.ndim != 4:
        raise InvalidArgument(f"cross_entropy: logits must be [N,K,H,W], got {z.shape}")
    n, k, h, w = z.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise InvalidArgument(f"cross_entropy: labels shape {labels.shape} != {(n, h, w)}")
    valid = np.ones(labels.shape, bool) if ignore_label is None else labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidArgument(f"cross_entropy: label {labels[loc]} out of range [0,{k}) at pixel {loc}")
    count = int(valid.sum())
    if count == 0:
        return _make(np.zeros((), z.dtype), (logits,), lambda g: (np.zeros_like(z),), "cross_entropy")

    z64 = z.astype(np.float64)
    zmax = z64.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z64 - zmax).sum(axis=1, keepdims=True)) + zmax
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(z64, safe[:, None], axis=1)
    nll = (logsum - picked)[:, 0]
    loss = (nll * valid).sum() / count

    def bw(g):
        p = np.exp(z64 - logsum)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        p *= valid[:, None] / count
        return ((p * g).astype(z.dtype),)
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise InvalidArgument(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        new_m[name] = np.asarray(m, dtype=p.dtype)
        new_v[name] = np.asarray(v, dtype=p.dtype)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state
