"""Define-by-run reverse-mode differentiation over dense float arrays.

Values are plain ``numpy.ndarray`` objects. Every operation evaluates eagerly
when it is created and also records how to recompute itself, so ``forward``
can replay the graph after a leaf value has been changed in place (handy for
finite-difference checks).

Complex quantities never appear here; callers carry them as a leading
channel axis of size 2.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

log = logging.getLogger(__name__)

Array = np.ndarray


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "name", "graph", "_fwd", "_bwd")

    def __init__(self, graph, op, inputs, value, fwd=None, bwd=None, name=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self._fwd = fwd
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.op}{label}, shape={self.shape})"


class Graph:
    """Append-only node list; creation order is a topological order."""

    def __init__(self, dtype=np.float64):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.dtype = dtype

    def leaf(self, value, name=None) -> Node:
        value = np.array(value, dtype=self.dtype)
        node = Node(self, "leaf", (), value, name=name)
        self.nodes.append(node)
        self.leaves.append(node.id)
        return node

    def _emit(self, op, inputs, fwd, bwd) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise ValueError(f"{op}: input node belongs to a different graph")
        value = fwd(*(x.value for x in inputs))
        node = Node(self, op, [x.id for x in inputs], value, fwd, bwd)
        self.nodes.append(node)
        return node


def forward(graph: Graph) -> None:
    """Recompute every non-leaf value in creation order."""
    nodes = graph.nodes
    for node in nodes:
        if node._fwd is not None:
            node.value = node._fwd(*(nodes[i].value for i in node.inputs))


def backward(graph: Graph, root: Node) -> None:
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = graph.nodes
    for node in nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes[: root.id + 1]):
        if node.grad is None or node._bwd is None:
            continue
        ins = [nodes[i] for i in node.inputs]
        grads = node._bwd(node.grad, node.value, *(x.value for x in ins))
        for x, g in zip(ins, grads):
            if g is None:
                continue
            x.grad = g if x.grad is None else x.grad + g
    for node in nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)


def _same_shape(op, a: Node, b: Node):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return a.graph._emit("add", (a, b), np.add, lambda g, out, x, y: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return a.graph._emit("sub", (a, b), np.subtract, lambda g, out, x, y: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return a.graph._emit("mul", (a, b), np.multiply, lambda g, out, x, y: (g * y, g * x))


def scale(a: Node, c) -> Node:
    """Multiply ``a`` by a constant float or by a scalar node."""
    if isinstance(c, Node):
        if c.value.size != 1:
            raise ShapeError(f"scale: factor must be scalar, got shape {c.shape}")
        return a.graph._emit(
            "scale",
            (a, c),
            lambda x, s: x * s,
            lambda g, out, x, s: (g * s, np.reshape(np.sum(g * x), np.shape(s))),
        )
    c = float(c)
    return a.graph._emit("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def relu(a: Node) -> Node:
    return a.graph._emit(
        "relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),)
    )


def softplus(a: Node) -> Node:
    return a.graph._emit(
        "softplus",
        (a,),
        lambda x: np.logaddexp(0.0, x),
        lambda g, out, x: (g / (1.0 + np.exp(-x)),),
    )


def soft_threshold(x: Node, theta: Node) -> Node:
    """sign(x) * max(|x| - theta, 0); zero subgradient on the kink."""
    if theta.value.size != 1:
        raise ShapeError(f"soft_threshold: theta must be scalar, got shape {theta.shape}")
    if float(theta.value) < 0:
        raise ValueError(f"soft_threshold: theta must be >= 0, got {float(theta.value)}")

    def fwd(v, t):
        if t < 0:
            raise ValueError(f"soft_threshold: theta must be >= 0, got {float(t)}")
        return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)

    def bwd(g, out, v, t):
        live = np.abs(v) > t
        gx = g * live
        gt = -np.sum(gx * np.sign(v))
        return gx, np.reshape(gt, np.shape(t))

    return x.graph._emit("soft_threshold", (x, theta), fwd, bwd)


def sum_all(a: Node) -> Node:
    return a.graph._emit(
        "sum", (a,), lambda x: np.asarray(np.sum(x)), lambda g, out, x: (np.full_like(x, g),)
    )


def linear(a: Node, fn: Callable[[Array], Array], adjoint: Callable[[Array], Array], op="linear") -> Node:
    """Wrap a fixed linear map; ``adjoint`` must be its exact transpose."""
    return a.graph._emit(op, (a,), fn, lambda g, out, x: (adjoint(g),))


# -- convolution ----------------------------------------------------------


def _patches(x: Array, k: int) -> Array:
    """(C, H, W) -> (C*k*k, H*W) with zero 'same' padding."""
    c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x
    s0, s1, s2 = xp.strides
    win = as_strided(xp, (c, k, k, h, w), (s0, s1, s2, s1, s2), writeable=False)
    return win.reshape(c * k * k, h * w)


def _conv(x: Array, kernel: Array, bias: Array) -> Array:
    cout, cin, k, _ = kernel.shape
    _, h, w = x.shape
    out = kernel.reshape(cout, cin * k * k) @ _patches(x, k)
    return out.reshape(cout, h, w) + bias[:, None, None]


def conv2d(x: Node, kernel: Node, bias: Node) -> Node:
    """Stride-1 cross-correlation with zero 'same' padding."""
    if x.value.ndim != 3:
        raise ShapeError(f"conv2d: input must be C_in x H x W, got shape {x.shape}")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got shape {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd and square, got {kh}x{kw}")
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d: C_in mismatch, input has {x.shape[0]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: C_out mismatch, bias shape {bias.shape}, kernel has {cout} outputs")
    k = kh
    saved = {}  # im2col of the latest forward input, reused by backward

    def fwd(xv, kv, bv):
        h, w = xv.shape[1:]
        saved["cols"] = cols = _patches(xv, k)
        out = kv.reshape(cout, cin * k * k) @ cols
        return out.reshape(cout, h, w) + bv[:, None, None]

    def bwd(g, out, xv, kv, bv):
        h, w = xv.shape[1:]
        g2 = g.reshape(cout, h * w)
        gk = (g2 @ saved["cols"].T).reshape(kv.shape)
        flipped = kv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv(g, flipped, np.zeros(cin, dtype=g.dtype))
        return gx, gk, g2.sum(axis=1)

    return x.graph._emit("conv2d", (x, kernel, bias), fwd, bwd)


# -- losses ---------------------------------------------------------------


def _broadcast_mask(mask: Array, shape) -> Array:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape == tuple(shape):
        return mask
    if len(shape) == 3 and mask.shape == tuple(shape[1:]):
        return np.broadcast_to(mask, shape)
    raise ShapeError(f"masked_mse: mask shape {mask.shape} does not fit value shape {shape}")


def masked_mse(a: Node, b: Node, mask: Array) -> Node:
    """sum(m * (a - b)^2) / count(m), counting entries after channel broadcast."""
    _same_shape("masked_mse", a, b)
    m = _broadcast_mask(mask, a.shape)
    count = int(np.count_nonzero(m))
    if count == 0:
        log.warning("masked_mse: empty mask, loss is identically zero")
    denom = float(max(1, count))

    def fwd(x, y):
        d = x - y
        return np.asarray(np.sum(m * d * d) / denom)

    def bwd(g, out, x, y):
        gx = (2.0 * g / denom) * m * (x - y)
        return gx, -gx

    return a.graph._emit("masked_mse", (a, b), fwd, bwd)


def mean(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ValueError("mean of an empty node list")
    acc = nodes[0]
    for n in nodes[1:]:
        acc = add(acc, n)
    return scale(acc, 1.0 / len(nodes)) if len(nodes) > 1 else acc
