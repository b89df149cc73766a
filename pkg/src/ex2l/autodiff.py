"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Node` wraps an ``np.ndarray`` together with the operation that
produced it.  ``backward`` pushes the gradient of a scalar root into the
``grad`` slot of every leaf that requires it; ``grad_of`` answers a single
first-order query (d root / d target) without touching those slots and
without recording anything new in the graph.

Only the operations needed for small CNNs, the Grad-CAM penalty and the
similarity functions are provided.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, UsageError

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("value", "parents", "op", "grad", "requires_grad", "_backward", "id")

    def __init__(self, value, parents=(), op="const", backward=None, requires_grad=None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(value) -> Node:
    """A leaf that accumulates gradients."""
    return Node(np.array(value), op="param", requires_grad=True)


def constant(value) -> Node:
    return Node(value, op="const", requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _wrap(x, like: Optional[np.ndarray] = None):
    if isinstance(x, Node):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return constant(arr)


# ---------------------------------------------------------------------------
# graph traversal

def _ancestors(root: Node) -> list[Node]:
    """All nodes reachable from root (inclusive), sorted parents-first."""
    seen = {root.id: root}
    stack = [root]
    while stack:
        n = stack.pop()
        for p in n.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n.id)


def graph_size(root: Node) -> int:
    return len(_ancestors(root))


def _propagate(root: Node, order: list[Node], active: dict[int, bool], seed: np.ndarray):
    """Push ``seed`` backwards through ``order`` (parents-first) along active nodes.

    Returns the dict of accumulated gradients keyed by node id.
    """
    grads = {root.id: seed}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        need = [active.get(p.id, False) for p in node.parents]
        if not any(need):
            continue
        pgrads = node._backward(g, need)
        for p, flag, pg in zip(node.parents, need, pgrads):
            if not flag or pg is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
        if node is not root:
            del grads[node.id]
    return grads


def backward(root: Node) -> None:
    """Accumulate d root / d leaf into ``leaf.grad`` for every requires-grad leaf.

    Gradients are added to whatever the slots already hold; callers zero them.
    The graph is left intact so backward can be called again.
    """
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    order = _ancestors(root)
    active = {n.id: n.requires_grad for n in order}
    seed = np.ones_like(root.value)
    grads = _propagate(root, order, active, seed)
    for node in order:
        if node.parents or not node.requires_grad:
            continue
        g = grads.get(node.id)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad_of(root: Node, target: Node) -> np.ndarray:
    """d root / d target as a plain array.

    First-order only: the result is detached, no nodes are created and no
    ``grad`` slot is modified.
    """
    if root.value.size != 1:
        raise UsageError(f"grad_of needs a scalar root, got shape {root.shape}")
    order = _ancestors(root)
    if not any(n is target for n in order):
        raise UsageError("target is not reachable from root")
    # a node is active when it lies on some path from target up to root
    active = {target.id: True}
    for n in order:
        if n.id != target.id and any(active.get(p.id, False) for p in n.parents):
            active[n.id] = True
    seed = np.ones_like(root.value)
    grads = _propagate(root, order, active, seed)
    g = grads.get(target.id)
    if g is None:
        return np.zeros_like(target.value)
    return np.array(g, copy=True)


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return Node(a.value + b.value, (a, b), "add", back)


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(-g, sb) if need[1] else None)

    return Node(a.value - b.value, (a, b), "sub", back)


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def back(g, need):
        return (_unbroadcast(g * bv, av.shape) if need[0] else None,
                _unbroadcast(g * av, bv.shape) if need[1] else None)

    return Node(av * bv, (a, b), "mul", back)


def div(a, b) -> Node:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g, need):
        return (_unbroadcast(g / bv, av.shape) if need[0] else None,
                _unbroadcast(-g * out / bv, bv.shape) if need[1] else None)

    return Node(out, (a, b), "div", back)


def _pair(a, b):
    if isinstance(a, Node):
        return a, _wrap(b, a.value)
    if isinstance(b, Node):
        return _wrap(a, b.value), b
    return constant(a), constant(b)


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), "neg", lambda g, need: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), "exp", lambda g, need: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    return Node(np.log(av), (a,), "log", lambda g, need: (g / av,))


def sqrt(a: Node) -> Node:
    """Square root whose derivative at exactly 0 is taken as 0."""
    out = np.sqrt(a.value)

    def back(g, need):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return Node(out, (a,), "sqrt", back)


def square(a: Node) -> Node:
    av = a.value
    return Node(av * av, (a,), "square", lambda g, need: (2.0 * g * av,))


def power(a: Node, exponent: float) -> Node:
    av = a.value
    out = av ** exponent
    return Node(out, (a,), "pow", lambda g, need: (g * exponent * av ** (exponent - 1),))


def abs_(a: Node) -> Node:
    av = a.value
    return Node(np.abs(av), (a,), "abs", lambda g, need: (g * np.sign(av),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    out = np.where(mask, a.value, 0).astype(a.value.dtype)
    return Node(out, (a,), "relu", lambda g, need: (_relu_grad(g, mask),))


def _relu_grad(g, mask):
    return g * mask


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    shape = a.shape

    def back(g, need):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)


def mean(a: Node, axis=None, keepdims=False) -> Node:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def back(g, need):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Node(a.value.mean(axis=axis, keepdims=keepdims), (a,), "mean", back)


def amax(a: Node, axis) -> Node:
    """Max over ``axis`` (int or tuple); the gradient goes to the first maximal entry."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.value, keep + list(axes))
    lead = moved.shape[:len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    shape = a.shape

    def back(g, need):
        out = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(out, arg[..., None], g[..., None], axis=-1)
        out = out.reshape(moved.shape)
        return (np.transpose(out, np.argsort(keep + list(axes))).reshape(shape),)

    return Node(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], (a,), "amax", back)


def maximum(a, b) -> Node:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.value >= b.value

    def back(g, need):
        return (_unbroadcast(g * pick_a, a.shape) if need[0] else None,
                _unbroadcast(g * ~pick_a, b.shape) if need[1] else None)

    return Node(np.where(pick_a, a.value, b.value), (a, b), "maximum", back)


def reshape(a: Node, shape) -> Node:
    orig = a.shape
    return Node(a.value.reshape(shape), (a,), "reshape", lambda g, need: (g.reshape(orig),))


def flatten(a: Node) -> Node:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def take_rows(a: Node, index) -> Node:
    """``out[i] = a[i, index[i]]`` for a 2-D node."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g, need):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return Node(a.value[rows, index], (a,), "take_rows", back)


# ---------------------------------------------------------------------------
# network layers

def dense(x: Node, w: Node, b: Node) -> Node:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    xv, wv = x.value, w.value

    def back(g, need):
        return (g @ wv if need[0] else None,
                g.T @ xv if need[1] else None,
                g.sum(axis=0) if need[2] else None)

    return Node(xv @ wv.T + b.value, (x, w, b), "dense", back)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Rows are output pixels (b, i, j); columns are (c, di, dj)."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d(x: Node, w: Node, b: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation, NCHW input, weight (out, in, kh, kw)."""
    xv, wv = x.value, w.value
    B, C, H, W = xv.shape
    O, Cw, kh, kw = wv.shape
    if C != Cw:
        raise UsageError(f"conv2d: input has {C} channels, weight expects {Cw}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols, Ho, Wo = _im2col(xp, kh, kw, stride)
    w2 = wv.reshape(O, -1)
    out = (cols @ w2.T + b.value).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g, need):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        if need[0]:
            gx = _conv2d_grad_input(g2, wv, xp.shape, stride, padding, Ho, Wo)
        if need[1]:
            gw = (g2.T @ cols).reshape(wv.shape)
        if need[2]:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return Node(out, (x, w, b), "conv2d", back)


def _conv2d_grad_input(g2, wv, padded_shape, stride, padding, Ho, Wo):
    """Gradient w.r.t. the unpadded input; ``g2`` is the output grad as (B*Ho*Wo, O)."""
    O, C, kh, kw = wv.shape
    B, _, Hp, Wp = padded_shape
    gc = (g2 @ wv.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    gxp = np.zeros((B, Hp, Wp, C), dtype=g2.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gc[..., i, j]
    if padding:
        gxp = gxp[:, padding:Hp - padding, padding:Wp - padding, :]
    return np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))


def maxpool2(x: Node) -> Node:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in (0,0), (0,1), (1,0), (1,1) order.
    """
    xv = x.value
    B, C, H, W = xv.shape
    H2, W2 = H // 2, W // 2
    q = [xv[:, :, di:2 * H2:2, dj:2 * W2:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))

    def back(g, need):
        gx = np.zeros(xv.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = q[k] == out
            hit &= ~taken
            taken |= hit
            gx[:, :, di:2 * H2:2, dj:2 * W2:2] = g * hit
        return (gx,)

    return Node(out, (x,), "maxpool2", back)


# ---------------------------------------------------------------------------
# losses

def bce_with_logits(logits: Node, targets, reduction: str = "mean") -> Node:
    """Binary cross-entropy on raw logits in the overflow-free form.

    ``logits`` may be (B,) or (B, 1).
    """
    s = logits.value.reshape(-1)
    y = np.asarray(targets, dtype=s.dtype).reshape(-1)
    if y.shape != s.shape:
        raise UsageError(f"bce_with_logits: {s.shape[0]} logits vs {y.shape[0]} targets")
    if np.any((y != 0) & (y != 1)):
        raise DataError("bce_with_logits: targets must be 0 or 1")
    per = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    shape = logits.shape
    sig = _sigmoid(s)
    n = s.shape[0]

    if reduction == "none":
        return Node(per, (logits,), "bce", lambda g, need: (((sig - y) * g).reshape(shape),))

    def back(g, need):
        return (((sig - y) * (g / n)).reshape(shape),)

    return Node(np.asarray(per.mean()), (logits,), "bce", back)


def _sigmoid(s):
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cce_with_logits(logits: Node, targets, reduction: str = "mean") -> Node:
    """Categorical cross-entropy on raw logits of shape (B, K)."""
    z = logits.value
    B, K = z.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != B:
        raise UsageError(f"cce_with_logits: {B} rows vs {t.shape[0]} targets")
    if np.any((t < 0) | (t >= K)):
        raise DataError(f"cce_with_logits: target index outside [0, {K})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(B)
    per = lse - z[rows, t]
    soft = np.exp(z - lse[:, None])
    soft[rows, t] -= 1.0

    if reduction == "none":
        return Node(per, (logits,), "cce", lambda g, need: (soft * g[:, None],))

    return Node(np.asarray(per.mean()), (logits,), "cce", lambda g, need: (soft * (g / B),))
