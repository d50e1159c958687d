"""Reverse-mode autodiff over ComplexTensor values.

Each node carries a ComplexTensor value and (lazily) a gradient
accumulator of the same shape. Gradients are plain partial derivatives
of a real scalar loss with respect to the re and im planes, stored as
the planes of the grad tensor. The graph is a fresh tape per forward
pass: node ids increase monotonically, so walking the reachable set in
decreasing id order is a valid reverse topological order.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .ctensor import ComplexTensor
from .errors import ContractError, DimensionError

_ids = itertools.count()
_id_lock = threading.Lock()


def _next_id() -> int:
    with _id_lock:
        return next(_ids)


class GraphNode:
    """One value in the computation graph.

    parents is a list of (parent node, backward rule); the rule maps the
    gradient at this node to the contribution for that parent.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "id")

    def __init__(self, value: ComplexTensor, parents=(), requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = list(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.id = _next_id()

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: ComplexTensor):
        if g.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {g.shape} does not match value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad.re += g.re
            self.grad.im += g.im

    def grad_tensor(self) -> ComplexTensor:
        """Accumulated gradient, zeros if backward never reached this node."""
        if self.grad is None:
            return ComplexTensor.zeros(self.value.shape)
        return self.grad


def leaf(value: ComplexTensor, requires_grad=False) -> GraphNode:
    return GraphNode(value, (), requires_grad)


def constant(value: ComplexTensor) -> GraphNode:
    return GraphNode(value, (), False)


class Tape:
    """Reverse-ordered view of the subgraph reachable from one node."""

    def __init__(self, root: GraphNode):
        seen = {root.id}
        stack = [root]
        nodes = []
        while stack:
            n = stack.pop()
            nodes.append(n)
            for p, _ in n.parents:
                if p.requires_grad and p.id not in seen:
                    seen.add(p.id)
                    stack.append(p)
        nodes.sort(key=lambda n: n.id)
        self.nodes = nodes

    def ids(self):
        return [n.id for n in self.nodes]


def backward(loss: GraphNode) -> dict:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad node.

    Returns a map {leaf id: grad ComplexTensor} over requires_grad leaves.
    Repeated calls without zero_grad add up.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    if np.any(loss.value.im != 0.0):
        raise ContractError("loss must be real-valued (zero imaginary plane)")
    if not loss.requires_grad:
        return {}
    seed = ComplexTensor(np.ones(loss.value.shape), np.zeros(loss.value.shape))
    loss.accumulate(seed)
    out = {}
    for node in reversed(Tape(loss).nodes):
        g = node.grad
        if g is None:
            continue
        if not node.parents:
            out[node.id] = node.grad
            continue
        for parent, rule in node.parents:
            if parent.requires_grad:
                parent.accumulate(rule(g))
    return out


# -- gradient shaping helpers -------------------------------------------

def _unbroadcast(g_re, g_im, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g_re.ndim > len(shape):
        g_re = g_re.sum(axis=0)
        g_im = g_im.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g_re.shape[ax] != 1:
            g_re = g_re.sum(axis=ax, keepdims=True)
            g_im = g_im.sum(axis=ax, keepdims=True)
    return ComplexTensor(g_re, g_im)


def _bshape(a, b):
    return np.broadcast_shapes(a.value.shape, b.value.shape)


# -- primitive operations -------------------------------------------------

def add(a: GraphNode, b: GraphNode) -> GraphNode:
    val = ComplexTensor(a.value.re + b.value.re, a.value.im + b.value.im)
    return GraphNode(val, (
        (a, lambda g: _unbroadcast(g.re, g.im, a.value.shape)),
        (b, lambda g: _unbroadcast(g.re, g.im, b.value.shape)),
    ))


def sub(a: GraphNode, b: GraphNode) -> GraphNode:
    val = ComplexTensor(a.value.re - b.value.re, a.value.im - b.value.im)
    return GraphNode(val, (
        (a, lambda g: _unbroadcast(g.re, g.im, a.value.shape)),
        (b, lambda g: _unbroadcast(-g.re, -g.im, b.value.shape)),
    ))


def mul(a: GraphNode, b: GraphNode) -> GraphNode:
    """Elementwise complex product with numpy broadcasting."""
    ar, ai, br, bi = a.value.re, a.value.im, b.value.re, b.value.im
    val = ComplexTensor(ar * br - ai * bi, ar * bi + ai * br)
    # adjoint of a complex-bilinear op: g times the conjugate of the other factor
    return GraphNode(val, (
        (a, lambda g: _unbroadcast(g.re * br + g.im * bi, g.im * br - g.re * bi,
                                   a.value.shape)),
        (b, lambda g: _unbroadcast(g.re * ar + g.im * ai, g.im * ar - g.re * ai,
                                   b.value.shape)),
    ))


def scale(a: GraphNode, s: float) -> GraphNode:
    return GraphNode(a.value.scale(s), ((a, lambda g: g.scale(s)),))


def neg(a: GraphNode) -> GraphNode:
    return scale(a, -1.0)


def conj(a: GraphNode) -> GraphNode:
    return GraphNode(a.value.conj(), ((a, lambda g: g.conj()),))


def re_part(a: GraphNode) -> GraphNode:
    """Real plane as a real-valued node (imaginary plane zero)."""
    val = ComplexTensor(a.value.re.copy(), np.zeros_like(a.value.re))
    return GraphNode(val, (
        (a, lambda g: ComplexTensor(g.re.copy(), np.zeros_like(g.re))),
    ))


def im_part(a: GraphNode) -> GraphNode:
    """Imaginary plane moved into the real plane of a real-valued node."""
    val = ComplexTensor(a.value.im.copy(), np.zeros_like(a.value.im))
    return GraphNode(val, (
        (a, lambda g: ComplexTensor(np.zeros_like(g.re), g.re.copy())),
    ))


def combine(re_node: GraphNode, im_node: GraphNode) -> GraphNode:
    """Pack two real-valued nodes into one complex node."""
    if re_node.value.shape != im_node.value.shape:
        raise DimensionError("combine operands must share a shape")
    val = ComplexTensor(re_node.value.re.copy(), im_node.value.re.copy())
    return GraphNode(val, (
        (re_node, lambda g: ComplexTensor(g.re.copy(), np.zeros_like(g.re))),
        (im_node, lambda g: ComplexTensor(g.im.copy(), np.zeros_like(g.im))),
    ))


def sqrt_re(a: GraphNode) -> GraphNode:
    """Square root of the real plane (operand must be real and positive)."""
    root = np.sqrt(a.value.re)
    inv2 = 0.5 / root
    return GraphNode(ComplexTensor(root, np.zeros_like(root)), (
        (a, lambda g: ComplexTensor(g.re * inv2, np.zeros_like(root))),
    ))


def recip_re(a: GraphNode) -> GraphNode:
    """Reciprocal of the real plane (operand must be real and nonzero)."""
    inv = 1.0 / a.value.re
    neg_sq = -inv * inv
    return GraphNode(ComplexTensor(inv, np.zeros_like(inv)), (
        (a, lambda g: ComplexTensor(g.re * neg_sq, np.zeros_like(inv))),
    ))


def add_const(a: GraphNode, c: float) -> GraphNode:
    val = ComplexTensor(a.value.re + c, a.value.im.copy())
    return GraphNode(val, ((a, lambda g: g),))


def mean_axes(a: GraphNode, axes: tuple) -> GraphNode:
    """Mean over the given axes, keepdims."""
    val = ComplexTensor(a.value.re.mean(axis=axes, keepdims=True),
                        a.value.im.mean(axis=axes, keepdims=True))
    n = a.value.size // val.size
    shape = a.value.shape

    def rule(g):
        s = 1.0 / n
        return ComplexTensor(np.broadcast_to(g.re * s, shape).copy(),
                             np.broadcast_to(g.im * s, shape).copy())

    return GraphNode(val, ((a, rule),))


def sum_all(a: GraphNode) -> GraphNode:
    val = ComplexTensor(np.asarray(a.value.re.sum()), np.asarray(a.value.im.sum()))
    shape = a.value.shape

    def rule(g):
        return ComplexTensor(np.broadcast_to(g.re, shape).copy(),
                             np.broadcast_to(g.im, shape).copy())

    return GraphNode(val, ((a, rule),))


def concat_channels(a: GraphNode, b: GraphNode) -> GraphNode:
    """Concatenate along axis 1 of [B, C, H, W] nodes."""
    ca = a.value.shape[1]
    val = ComplexTensor(np.concatenate([a.value.re, b.value.re], axis=1),
                        np.concatenate([a.value.im, b.value.im], axis=1))
    return GraphNode(val, (
        (a, lambda g: ComplexTensor(g.re[:, :ca].copy(), g.im[:, :ca].copy())),
        (b, lambda g: ComplexTensor(g.re[:, ca:].copy(), g.im[:, ca:].copy())),
    ))


# -- numeric check ---------------------------------------------------------

def grad_check(f, x: ComplexTensor, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    f maps a node to a scalar real-valued node. Both planes of x are
    perturbed elementwise; the relative error for each partial is
    |analytic - numeric| / max(|numeric|, 1e-8).
    """
    node = leaf(x.copy(), requires_grad=True)
    backward(f(node))
    analytic = node.grad_tensor()

    x = x.copy()
    num = ComplexTensor.zeros(x.shape)
    for plane, out in ((x.re, num.re), (x.im, num.im)):
        fp = plane.reshape(-1)
        op = out.reshape(-1)
        for i in range(fp.size):
            orig = fp[i]
            fp[i] = orig + eps
            f_hi = float(f(leaf(x.copy())).value.re)
            fp[i] = orig - eps
            f_lo = float(f(leaf(x.copy())).value.re)
            fp[i] = orig
            op[i] = (f_hi - f_lo) / (2.0 * eps)
    err_re = np.abs(analytic.re - num.re) / np.maximum(np.abs(num.re), 1e-8)
    err_im = np.abs(analytic.im - num.im) / np.maximum(np.abs(num.im), 1e-8)
    return float(max(err_re.max(), err_im.max()))
