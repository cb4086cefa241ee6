"""Two-channel reverse-mode autodiff.

Every node carries a value and one forward-mode tangent (the directional
derivative of the value along a seeded input direction).  The reverse sweep
differentiates both channels, so a loss built from input-directional
derivatives of a network can be differentiated with respect to the network
parameters exactly ("forward-over-reverse" on a single tape).

Nodes hold numpy arrays rather than Python scalars; each recorded operation is
still a single primitive with local partials for both channels.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "backward",
    "grad_check",
]

# vjp(out_bar_value, out_bar_tangent) -> per-parent (bar_value, bar_tangent)
Vjp = Callable[[np.ndarray, "np.ndarray | None"], Sequence[tuple]]


class Node:
    """One recorded array-valued quantity on a tape."""

    __slots__ = ("tape", "index", "value", "tangent", "parents", "vjp", "requires_grad")

    def __init__(self, tape, value, tangent, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.tangent = tangent  # None means identically zero
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

    # operator sugar; everything routes through the tape
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _t(node):
    return node.tangent if node.tangent is not None else 0.0


class Tape:
    """Append-only record of operations in topological order."""

    def __init__(self, dtype=np.float64):
        self.nodes: list[Node] = []
        self.dtype = np.dtype(dtype)

    # -- leaves -----------------------------------------------------------
    def variable(self, value, tangent=None) -> Node:
        """A differentiable leaf (gradients are reported for it)."""
        return Node(self, np.asarray(value, dtype=self.dtype), tangent, requires_grad=True)

    def constant(self, value, tangent=None) -> Node:
        """A leaf treated as constant by the reverse sweep.

        ``tangent`` seeds the forward channel, e.g. the input direction for a
        directional derivative.
        """
        value = np.asarray(value, dtype=self.dtype)
        if tangent is not None:
            tangent = np.broadcast_to(np.asarray(tangent, dtype=self.dtype), value.shape)
        return Node(self, value, tangent)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("node belongs to a different tape")
            return x
        return self.constant(x)

    def _record(self, value, tangent, parents, vjp) -> Node:
        req = any(p.requires_grad for p in parents)
        return Node(self, value, tangent, parents, vjp if req else None, req)

    def detach(self, node: Node) -> Node:
        """Pass value and tangent through; the reverse sweep stops here."""
        node = self._lift(node)
        return Node(self, node.value, node.tangent)

    # -- binary arithmetic ------------------------------------------------
    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        value = a.value + b.value
        tangent = None
        if a.tangent is not None and b.tangent is not None:
            tangent = np.broadcast_to(a.tangent + b.tangent, value.shape)
        elif a.tangent is not None or b.tangent is not None:
            tangent = np.broadcast_to(a.tangent if b.tangent is None else b.tangent, value.shape)

        def vjp(gv, gt):
            return (
                (_unbroadcast(gv, a.shape), None if gt is None else _unbroadcast(gt, a.shape)),
                (_unbroadcast(gv, b.shape), None if gt is None else _unbroadcast(gt, b.shape)),
            )

        return self._record(value, tangent, (a, b), vjp)

    def sub(self, a, b) -> Node:
        return self.add(a, self.scale(self._lift(b), -1.0))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        value = a.value * b.value
        tangent = None
        if a.tangent is not None or b.tangent is not None:
            tangent = np.broadcast_to(_t(a) * b.value + a.value * _t(b), value.shape)

        def vjp(gv, gt):
            ga = gv * b.value
            gb = gv * a.value
            gat = gbt = None
            if gt is not None:
                if b.tangent is not None:
                    ga = ga + gt * b.tangent
                if a.tangent is not None:
                    gb = gb + gt * a.tangent
                if a.tangent is not None:
                    gat = _unbroadcast(gt * b.value, a.shape)
                if b.tangent is not None:
                    gbt = _unbroadcast(gt * a.value, b.shape)
            return (
                (_unbroadcast(ga, a.shape), gat),
                (_unbroadcast(gb, b.shape), gbt),
            )

        return self._record(value, tangent, (a, b), vjp)

    def scale(self, a, c: float) -> Node:
        a = self._lift(a)
        tangent = None if a.tangent is None else c * a.tangent

        def vjp(gv, gt):
            return ((c * gv, None if gt is None else c * gt),)

        return self._record(c * a.value, tangent, (a,), vjp)

    def matmul(self, a, b) -> Node:
        """2-D matrix product ``a @ b``."""
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        value = a.value @ b.value
        tangent = None
        if a.tangent is not None and b.tangent is not None:
            tangent = a.tangent @ b.value + a.value @ b.tangent
        elif a.tangent is not None:
            tangent = a.tangent @ b.value
        elif b.tangent is not None:
            tangent = a.value @ b.tangent

        def vjp(gv, gt):
            ga = gv @ b.value.T if a.requires_grad else None
            gb = a.value.T @ gv if b.requires_grad else None
            gat = gbt = None
            if gt is not None:
                if b.tangent is not None and ga is not None:
                    ga = ga + gt @ b.tangent.T
                if a.tangent is not None and gb is not None:
                    gb = gb + a.tangent.T @ gt
                if a.requires_grad and a.tangent is not None:
                    gat = gt @ b.value.T
                if b.requires_grad and b.tangent is not None:
                    gbt = a.value.T @ gt
            return ((ga, gat), (gb, gbt))

        return self._record(value, tangent, (a, b), vjp)

    def minimum(self, a, b) -> Node:
        """Elementwise min; ties select ``a``."""
        a, b = self._lift(a), self._lift(b)
        pick_a = a.value <= b.value
        value = np.where(pick_a, a.value, b.value)
        tangent = None
        if a.tangent is not None or b.tangent is not None:
            tangent = np.where(pick_a, _t(a), _t(b))

        def vjp(gv, gt):
            za = np.where(pick_a, gv, 0.0)
            zb = np.where(pick_a, 0.0, gv)
            ta = tb = None
            if gt is not None:
                ta = _unbroadcast(np.where(pick_a, gt, 0.0), a.shape)
                tb = _unbroadcast(np.where(pick_a, 0.0, gt), b.shape)
            return ((_unbroadcast(za, a.shape), ta), (_unbroadcast(zb, b.shape), tb))

        return self._record(value, tangent, (a, b), vjp)

    # -- unary ------------------------------------------------------------
    def _unary(self, a, f, d1, d2) -> Node:
        """Apply f with first derivative d1 and second derivative d2 (lazy)."""
        a = self._lift(a)
        value = f(a.value)
        fp = d1(a.value, value)
        tangent = None if a.tangent is None else fp * a.tangent

        def vjp(gv, gt):
            g = gv * fp
            gtan = None
            if gt is not None:
                if a.tangent is not None:
                    g = g + gt * d2(a.value, value) * a.tangent
                    gtan = gt * fp
            return ((g, gtan),)

        return self._record(value, tangent, (a,), vjp)

    def tanh(self, a) -> Node:
        return self._unary(
            a,
            np.tanh,
            lambda x, y: 1.0 - y * y,
            lambda x, y: -2.0 * y * (1.0 - y * y),
        )

    def silu(self, a) -> Node:
        a = self._lift(a)
        s = _sigmoid(a.value)
        return self._unary(
            a,
            lambda x: x * s,
            lambda x, y: s * (1.0 + x * (1.0 - s)),
            lambda x, y: s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s)),
        )

    def relu(self, a) -> Node:
        # derivative at 0 is taken as 0
        return self._unary(
            a,
            lambda x: np.maximum(x, 0.0),
            lambda x, y: (x > 0).astype(x.dtype),
            lambda x, y: np.zeros_like(x),
        )

    def square(self, a) -> Node:
        return self._unary(a, np.square, lambda x, y: 2.0 * x, lambda x, y: np.full_like(x, 2.0))

    def sqrt(self, a) -> Node:
        return self._unary(
            a,
            np.sqrt,
            lambda x, y: 0.5 / y,
            lambda x, y: -0.25 / (x * y),
        )

    # -- structural -------------------------------------------------------
    def tangent_of(self, a) -> Node:
        """Promote the tangent channel to a value.

        The result has a zero tangent (one tangent channel only); its reverse
        adjoint flows into the tangent channel of ``a``.
        """
        a = self._lift(a)
        value = np.array(_t(a), dtype=a.value.dtype) if a.tangent is None else a.tangent
        value = np.broadcast_to(value, a.shape)

        def vjp(gv, gt):
            return ((None, gv),)

        return self._record(np.array(value), None, (a,), vjp)

    def sum(self, a, axis=None) -> Node:
        a = self._lift(a)
        value = np.sum(a.value, axis=axis)
        tangent = None if a.tangent is None else np.sum(a.tangent, axis=axis)

        def expand(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape)

        def vjp(gv, gt):
            return ((expand(gv), None if gt is None else expand(gt)),)

        return self._record(np.asarray(value), tangent, (a,), vjp)

    def mean(self, a, axis=None) -> Node:
        a = self._lift(a)
        n = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / n)

    def reshape(self, a, shape) -> Node:
        a = self._lift(a)
        tangent = None if a.tangent is None else a.tangent.reshape(shape)

        def vjp(gv, gt):
            return ((gv.reshape(a.shape), None if gt is None else gt.reshape(a.shape)),)

        return self._record(a.value.reshape(shape), tangent, (a,), vjp)

    def column(self, a, j: int) -> Node:
        """Column ``j`` of a 2-D node, as a 1-D node."""
        a = self._lift(a)
        tangent = None if a.tangent is None else a.tangent[:, j]

        def scatter(g):
            out = np.zeros(a.shape, dtype=a.value.dtype)
            out[:, j] = g
            return out

        def vjp(gv, gt):
            return ((scatter(gv), None if gt is None else scatter(gt)),)

        return self._record(a.value[:, j].copy(), tangent, (a,), vjp)

    def take(self, a, rows) -> Node:
        """Rows ``rows`` (integer index array) of ``a`` along axis 0."""
        a = self._lift(a)
        rows = np.asarray(rows)
        tangent = None if a.tangent is None else a.tangent[rows]

        def scatter(g):
            out = np.zeros(a.shape, dtype=a.value.dtype)
            np.add.at(out, rows, g)
            return out

        def vjp(gv, gt):
            return ((scatter(gv), None if gt is None else scatter(gt)),)

        return self._record(a.value[rows], tangent, (a,), vjp)

    def segment_sum(self, a, weights, segments, n_segments: int) -> Node:
        """``out[s] = sum_k weights[k] * a[k]`` over ``k`` with ``segments[k] == s``."""
        a = self._lift(a)
        weights = np.asarray(weights, dtype=np.float64)
        segments = np.asarray(segments)

        def seg(x):
            return np.bincount(segments, weights=weights * x, minlength=n_segments)

        tangent = None if a.tangent is None else seg(a.tangent)

        dt = a.value.dtype

        def vjp(gv, gt):
            return (((weights * gv[segments]).astype(dt, copy=False), None if gt is None else (weights * gt[segments]).astype(dt, copy=False)),)

        return self._record(seg(a.value), tangent, (a,), vjp)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def backward(tape: Tape, output: Node, wrt: Sequence[Node]) -> np.ndarray:
    """Reverse sweep from a scalar ``output``.

    Returns the flat concatenation of d(output)/d(leaf) for each leaf in
    ``wrt``; leaves with no path to the output get zeros.
    """
    if output.tape is not tape or output.index >= len(tape.nodes) or tape.nodes[output.index] is not output:
        raise ValueError("output node is not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")

    bar_v: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    bar_t: dict[int, np.ndarray] = {}
    leaf_grads: dict[int, np.ndarray] = {}

    def acc(store, idx, g):
        if g is None:
            return
        prev = store.get(idx)
        store[idx] = g if prev is None else prev + g

    for node in reversed(tape.nodes[: output.index + 1]):
        if not node.requires_grad:
            continue
        gv = bar_v.pop(node.index, None)
        gt = bar_t.pop(node.index, None)
        if node.vjp is None:
            if gv is not None:
                leaf_grads[node.index] = gv
            continue
        if gv is None and gt is None:
            continue
        if gv is None:
            gv = np.zeros_like(node.value)
        for parent, (pv, pt) in zip(node.parents, node.vjp(gv, gt)):
            if not parent.requires_grad:
                continue
            acc(bar_v, parent.index, pv)
            if parent.tangent is not None:
                acc(bar_t, parent.index, pt)

    out = []
    for leaf in wrt:
        g = leaf_grads.get(leaf.index)
        out.append(np.zeros(leaf.value.size) if g is None else np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(out) if out else np.zeros(0)


def grad_check(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
