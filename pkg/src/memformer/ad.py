"""Tape-based reverse-mode differentiation over dense float64 matrices.

Values are numpy arrays. A matrix is ``(rows, cols)``; a scalar is ``()``.
Any value may carry one leading batch axis (``(batch, rows, cols)`` or
``(batch,)``), and an unbatched operand combines with a batched one as if it
were repeated along that axis. The gradient of such a shared operand is the
sum over the batch axis, reduced with ``np.sum(axis=0)``, so the reduction
order is fixed for a given batch shape and runs are reproducible.

The tape is define-by-run: build a fresh :class:`Tape` per forward pass,
register parameters with :meth:`Tape.leaf`, compose the primitives below, and
call :func:`backward` on a scalar root.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


@dataclass
class Node:
    op: str
    inputs: tuple
    value: np.ndarray
    vjp: Optional[Callable]
    name: Optional[str] = None
    requires_grad: bool = False


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def node(self):
        return self.tape.nodes[self.index]

    @property
    def value(self):
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    @property
    def name(self):
        return self.node.name

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __mul__(self, c):
        return scale(c, self)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(-1.0, self)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(op={self.node.op!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations run, so every node's operands precede
    it. :func:`backward` walks the list once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, vjp=None, name=None, requires_grad=False):
        self.nodes.append(Node(op, tuple(inputs), value, vjp, name, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name=None, requires_grad=True):
        """Register an external value. Non-finite entries are rejected."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"leaf {name!r}: non-finite entries")
        if arr.ndim > 3:
            raise ShapeError("leaf", arr.shape)
        return self._push("leaf", (), arr, name=name, requires_grad=requires_grad)

    def constant(self, value, name=None):
        return self.leaf(value, name=name, requires_grad=False)

    def params(self):
        """Leaves that receive gradients, keyed by name."""
        return {n.name: Var(self, i) for i, n in enumerate(self.nodes) if n.op == "leaf" and n.requires_grad}


# ----------------------------------------------------------------------------
# helpers

def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    if tape is None:
        raise TypeError("at least one operand must be a Var")
    return tape


def _lift(tape, x):
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _is_matrix(shape):
    return len(shape) in (2, 3)


def _batch_compatible(op, a, b, core):
    """Check that two shapes share core dims and at most one batch axis."""
    ca, cb = a[len(a) - core:], b[len(b) - core:]
    ba, bb = a[: len(a) - core], b[: len(b) - core]
    if len(ba) > 1 or len(bb) > 1 or (ba and bb and ba != bb):
        raise ShapeError(op, a, b)
    return ca, cb


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    if g.ndim == len(shape) + 1:
        return np.sum(g, axis=0)
    raise ShapeError("unbroadcast", g.shape, shape)


def _core(shape):
    return 2 if len(shape) >= 2 else 0


# ----------------------------------------------------------------------------
# primitives

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    if _core(sa) != _core(sb):
        raise ShapeError("add", sa, sb)
    ca, cb = _batch_compatible("add", sa, sb, _core(sa))
    if ca != cb:
        raise ShapeError("add", sa, sb)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape._push("add", (a.index, b.index), out, vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    if _core(sa) != _core(sb):
        raise ShapeError("sub", sa, sb)
    ca, cb = _batch_compatible("sub", sa, sb, _core(sa))
    if ca != cb:
        raise ShapeError("sub", sa, sb)
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape._push("sub", (a.index, b.index), out, vjp)


def scale(c, m):
    """``c * m`` for a scalar ``c`` (float or scalar Var) and any ``m``."""
    tape = _tape_of(c, m)
    m = _lift(tape, m)
    if isinstance(c, Var):
        if c.shape != ():
            raise ShapeError("scale", c.shape, m.shape)
        cv, mv = c.value, m.value

        def vjp(g):
            return float(np.sum(g * mv)), cv * g

        return tape._push("scale", (c.index, m.index), cv * mv, vjp)
    c = float(c)

    def vjp_const(g):
        return (c * g,)

    return tape._push("scale", (m.index,), c * m.value, vjp_const)


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    if not (_is_matrix(sa) and _is_matrix(sb)):
        raise ShapeError("matmul", sa, sb)
    ca, cb = _batch_compatible("matmul", sa, sb, 2)
    if ca[1] != cb[0]:
        raise ShapeError("matmul", sa, sb)
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa), _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)

    return tape._push("matmul", (a.index, b.index), out, vjp)


def transpose(m):
    tape = _tape_of(m)
    if not _is_matrix(m.shape):
        raise ShapeError("transpose", m.shape)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return tape._push("transpose", (m.index,), np.swapaxes(m.value, -1, -2).copy(), vjp)


def hadamard(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    if not (_is_matrix(sa) and _is_matrix(sb)):
        raise ShapeError("hadamard", sa, sb)
    ca, cb = _batch_compatible("hadamard", sa, sb, 2)
    if ca != cb:
        raise ShapeError("hadamard", sa, sb)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)

    return tape._push("hadamard", (a.index, b.index), av * bv, vjp)


def entry(m, i, j):
    """The ``(i, j)`` entry of a matrix (per batch element if batched)."""
    tape = _tape_of(m)
    shape = m.shape
    if not _is_matrix(shape) or not (0 <= i < shape[-2] and 0 <= j < shape[-1]):
        raise ShapeError("entry", shape, (i, j))

    def vjp(g):
        out = np.zeros(shape)
        out[..., i, j] = g
        return (out,)

    return tape._push("entry", (m.index,), np.array(m.value[..., i, j]), vjp)


def square(s):
    tape = _tape_of(s)
    if len(s.shape) > 1:
        raise ShapeError("square", s.shape)
    v = s.value

    def vjp(g):
        return (2.0 * v * g,)

    return tape._push("square", (s.index,), v * v, vjp)


def mean(xs):
    """Mean of scalars: a list of scalar Vars, or the batch axis of a ``(batch,)`` Var."""
    if isinstance(xs, Var):
        if len(xs.shape) != 1:
            raise ShapeError("mean", xs.shape)
        tape, count, shape = xs.tape, xs.shape[0], xs.shape
        if count == 0:
            raise ValueError("mean: empty batch")

        def vjp(g):
            return (np.full(shape, g / count),)

        return tape._push("mean", (xs.index,), np.array(np.mean(xs.value)), vjp)
    xs = list(xs)
    if not xs:
        raise ValueError("mean: empty list")
    tape = _tape_of(*xs)
    for x in xs:
        if x.shape != ():
            raise ShapeError("mean", x.shape)
    count = len(xs)
    total = 0.0
    for x in xs:
        total = total + x.value

    def vjp_list(g):
        return tuple(np.array(g / count) for _ in range(count))

    return tape._push("mean", tuple(x.index for x in xs), np.array(total / count), vjp_list)


def sum_scalars(s):
    """Sum over the batch axis of a ``(batch,)`` Var."""
    tape = _tape_of(s)
    if len(s.shape) != 1:
        raise ShapeError("sum_scalars", s.shape)
    shape = s.shape

    def vjp(g):
        return (np.full(shape, g),)

    return tape._push("sum", (s.index,), np.array(np.sum(s.value)), vjp)


def linear_attention(Z, P, Q, n_ctx):
    """Fused ``P Z M (Z^T Q Z)`` where ``M`` keeps the first ``n_ctx`` columns.

    ``Z`` may be batched; ``P`` and ``Q`` are shared square matrices. The
    forward and backward passes run in :mod:`memformer.kernels`.
    """
    tape = _tape_of(Z, P, Q)
    Z, P, Q = _lift(tape, Z), _lift(tape, P), _lift(tape, Q)
    sz, sp, sq = Z.shape, P.shape, Q.shape
    if len(sz) not in (2, 3) or len(sp) != 2 or len(sq) != 2:
        raise ShapeError("linear_attention", sz, sp, sq)
    D = sz[-2]
    if sp != (D, D) or sq != (D, D) or not 0 <= n_ctx <= sz[-1]:
        raise ShapeError("linear_attention", sz, sp, sq)
    batched = len(sz) == 3
    Zb = Z.value if batched else Z.value[None]
    Pv, Qv = P.value, Q.value
    out, S, T = kernels.attention_forward(Zb, Pv, Qv, n_ctx)

    def vjp(g):
        gb = g if batched else g[None]
        dZ, dP, dQ = kernels.attention_backward(Zb, Pv, Qv, S, T, gb, n_ctx)
        return (dZ if batched else dZ[0]), dP, dQ

    return tape._push("linear_attention", (Z.index, P.index, Q.index), out if batched else out[0], vjp)


# ----------------------------------------------------------------------------
# reverse pass

def backward(tape: Tape, root: Var) -> dict:
    """Gradients of a scalar ``root`` with respect to every parameter leaf.

    Returns ``{leaf name: gradient}``; leaves the root does not depend on get
    zeros. The tape is not modified, so calling this twice gives identical
    results.
    """
    if root.tape is not tape:
        raise ValueError("root is not on this tape")
    if root.shape != ():
        raise ShapeError("backward (root must be scalar)", root.shape)
    grads: dict[int, np.ndarray] = {root.index: np.array(1.0)}
    nodes = tape.nodes
    for idx in range(root.index, -1, -1):
        g = grads.pop(idx, None) if nodes[idx].op != "leaf" else grads.get(idx)
        node = nodes[idx]
        if g is None or node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(src)
            grads[src] = gi if prev is None else prev + gi
    result = {}
    for idx, node in enumerate(nodes):
        if node.op == "leaf" and node.requires_grad:
            key = node.name if node.name is not None else idx
            g = grads.get(idx)
            result[key] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return result


def value_and_grad(fn: Callable, params: dict) -> tuple:
    """Evaluate ``fn(tape, vars)`` on a fresh tape and differentiate its scalar result.

    ``params`` maps names to arrays; ``vars`` maps the same names to leaves.
    """
    tape = Tape()
    vars_ = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = fn(tape, vars_)
    return float(root.value), backward(tape, root)


def numeric_grad(f: Callable[[dict], float], params: dict, step: float = 1e-6, names: Sequence[str] | None = None) -> dict:
    """Central finite differences of ``f`` with respect to each entry of ``params``."""
    out = {}
    for name in names if names is not None else params:
        base = np.array(params[name], dtype=np.float64)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = {**params, name: base.copy()}
            minus = {**params, name: base.copy()}
            plus[name][idx] += step
            minus[name][idx] -= step
            g[idx] = (f(plus) - f(minus)) / (2.0 * step)
        out[name] = g
    return out
