"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records nodes in creation order, which is already a topological
order, so the backward pass is a single reverse sweep that runs each node's
local gradient exactly once. Tapes are single-owner: building a graph and
running backward must happen on one thread, distinct tapes are independent.

The primitive set is intentionally small: add, sub, mul, matmul, exp, log,
max_with_scalar, abs, sum, mean, sigmoid, softmax_over_last_axis, relu.
Binary elementwise ops accept same-shape operands, a scalar on either side,
or a (1, k) row against an (n, k) matrix (bias broadcasting). Kinked ops
(abs, max, relu) use the subgradient-0 convention at the kink.

Also here: a central-difference gradient checker and a bias-corrected Adam
optimizer, both operating on plain numpy arrays.
"""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NonFiniteError,
    NonScalarRootError,
    ShapeError,
    TapeReusedError,
)


class Tape:
    """Ordered record of one computation graph."""

    __slots__ = ("_nodes", "_consumed", "vjp_calls")

    def __init__(self):
        self._nodes: list[Node] = []
        self._consumed = False
        self.vjp_calls = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> "Node":
        """Register an input node (parameter or constant)."""
        return _make(self, value, (), None)

    # Constants are ordinary leaves; their adjoints are computed and ignored.
    constant = leaf


class Node:
    """One tape entry: a value, its adjoint, and the local gradient closure."""

    __slots__ = ("tape", "value", "adjoint", "_parents", "_vjp")

    def __init__(self, tape, value, parents, vjp):
        self.tape = tape
        self.value = value
        self.adjoint = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return abs(self)


def _make(tape: Tape, value, parents, vjp) -> Node:
    if type(value) is not np.ndarray or value.dtype != np.float64:
        value = np.asarray(value, dtype=np.float64)
    # One reduction catches NaN/Inf except when finite entries overflow the
    # sum, so only that rare verdict is double-checked elementwise.
    if not math.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced on tape")
    node = Node(tape, value, parents, vjp)
    tape._nodes.append(node)
    return node


def _as_node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ShapeError("operands live on different tapes")
        return x
    return tape.leaf(x)


def _binary_tape(a, b) -> Tape:
    if isinstance(a, Node):
        return a.tape
    if isinstance(b, Node):
        return b.tape
    raise ShapeError("at least one operand must be a Node")


def _check_elementwise(sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 2 and sa[1] == sb[1] and 1 in (sa[0], sb[0]):
        return
    raise ShapeError(f"incompatible elementwise shapes {sa} and {sb}")

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # (1, k) row broadcast against (n, k)
    return g.sum(axis=0, keepdims=True)


def add(a, b) -> Node:
    tape = _binary_tape(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_elementwise(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(tape, a.value + b.value, (a, b), vjp)


def sub(a, b) -> Node:
    tape = _binary_tape(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_elementwise(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(tape, a.value - b.value, (a, b), vjp)


def mul(a, b) -> Node:
    tape = _binary_tape(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _check_elementwise(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(tape, a.value * b.value, (a, b), vjp)


def matmul(a, b) -> Node:
    tape = _binary_tape(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _make(tape, a.value @ b.value, (a, b), vjp)


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)

    def vjp(g):
        return (g * out,)

    return _make(a.tape, out, (a,), vjp)


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)

    def vjp(g):
        return (g / a.value,)

    return _make(a.tape, out, (a,), vjp)


def max_with_scalar(a: Node, s: float) -> Node:
    s = float(s)

    def vjp(g):
        return (g * (a.value > s),)

    return _make(a.tape, np.maximum(a.value, s), (a,), vjp)


def _abs(a: Node) -> Node:
    def vjp(g):
        return (g * np.sign(a.value),)

    return _make(a.tape, np.abs(a.value), (a,), vjp)


def _sum(a: Node) -> Node:
    def vjp(g):
        return (np.full(a.shape, float(g)),)

    return _make(a.tape, a.value.sum(), (a,), vjp)


def mean(a: Node) -> Node:
    size = a.value.size

    def vjp(g):
        return (np.full(a.shape, float(g) / size),)

    return _make(a.tape, a.value.mean(), (a,), vjp)


def sigmoid(a: Node) -> Node:
    x = a.value
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(a.tape, out, (a,), vjp)


def softmax_over_last_axis(a: Node) -> Node:
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(a.tape, out, (a,), vjp)


def relu(a: Node) -> Node:
    def vjp(g):
        return (g * (a.value > 0),)

    return _make(a.tape, np.maximum(a.value, 0.0), (a,), vjp)


# Exported under the plain names; numpy sets the precedent for shadowing
# the builtins inside a numerical namespace.
abs = _abs
sum = _sum


def backward(root: Node) -> None:
    """Populate adjoints for every node on the root's tape.

    The root must be scalar; a tape can be swept once only.
    """
    tape = root.tape
    if tape._consumed:
        raise TapeReusedError("backward already ran on this tape")
    if root.value.shape != ():
        raise NonScalarRootError(f"backward root must be scalar, got {root.value.shape}")
    tape._consumed = True
    root.adjoint = np.ones_like(root.value)
    for node in reversed(tape._nodes):
        if node._vjp is None:
            continue
        g = node.adjoint
        if g is None:
            # Node does not feed the root; its cotangent is zero.
            g = np.zeros_like(node.value)
            node.adjoint = g
        contribs = node._vjp(g)
        tape.vjp_calls += 1
        for parent, contrib in zip(node._parents, contribs):
            # Accumulation never mutates in place: a node's adjoint is final
            # by the time it is visited, so aliasing it into a parent is safe.
            if parent.adjoint is None:
                parent.adjoint = contrib
            else:
                parent.adjoint = parent.adjoint + contrib
    for node in tape._nodes:
        if node.adjoint is None:
            node.adjoint = np.zeros_like(node.value)


def gradcheck(f, args, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps leaf Nodes (one per entry of args) to a scalar Node. The caller
    is responsible for evaluating away from kinks. The error is
    |analytic - fd| / max(1, |fd|), maximised over all coordinates.
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]
    tape = Tape()
    leaves = [tape.leaf(a) for a in args]
    out = f(*leaves)
    if out.value.shape != ():
        raise NonScalarRootError("gradcheck target must be scalar")
    backward(out)
    analytic = [leaf.adjoint.copy() for leaf in leaves]

    def value_at(k: int, i: int, delta: float) -> float:
        shifted = [a.copy() for a in args]
        shifted[k].ravel()[i] += delta
        t = Tape()
        return float(f(*[t.leaf(a) for a in shifted]).value)

    worst = 0.0
    for k, base in enumerate(args):
        for i in range(base.size):
            fd = (value_at(k, i, h) - value_at(k, i, -h)) / (2.0 * h)
            err = builtins.abs(float(analytic[k].ravel()[i]) - fd) / max(1.0, builtins.abs(fd))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers are allocated on first use."""

    lr: float = 1e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads):
        raise ShapeError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.b1 ** state.step
    c2 = 1.0 - state.b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        m, v = state.m[i], state.v[i]
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {i} shape mismatch: {p.shape} vs {g.shape}")
        # Moment buffers are state-owned, so in-place updates are safe.
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        out.append(p - (state.lr / c1) * m / denom)
    return out
