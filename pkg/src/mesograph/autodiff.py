"""Minimal reverse-mode autodiff over dense float64 matrices.

Every tensor is a 2-D numpy array wrapped in a :class:`Value`; vectors are
1xN or Nx1. Operations record themselves on a :class:`Tape` in execution
order, and :func:`backward` replays the tape in reverse, accumulating
gradients into every Value on the path to the loss. There is no
broadcasting beyond the row-vector cases (`add_bias`) and no view sharing:
backward functions always combine gradients with out-of-place additions,
so an upstream gradient array is never mutated by a downstream consumer.

Subgradient convention at the relu/hinge kink: exactly 0 at x == 0.
"""

from __future__ import annotations

import weakref

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Value:
    """A node in the computation: 2-D float64 data plus accumulated grad.

    ``grad`` is lazily allocated: it stays None until backward reaches the
    node. Leaf grads survive across backward calls (repeated calls
    accumulate); intermediate grads are cleared at the start of each
    backward sweep.

    The back-reference to the tape is weak: the tape owns its values, not
    the other way around, so dropping the tape frees every intermediate
    by reference count alone instead of waiting for the cyclic collector
    (training allocates hundreds of MB per batch tape).
    """

    __slots__ = ("data", "grad", "_tape_ref", "__weakref__")

    def __init__(self, data: np.ndarray, tape: "Tape"):
        self.data = data
        self.grad = None
        self._tape_ref = weakref.ref(tape)

    @property
    def tape(self) -> "Tape":
        tape = self._tape_ref()
        if tape is None:
            raise RuntimeError("the tape this value was recorded on is gone")
        return tape

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape})"


class Tape:
    """Append-only record of operations; recording order is topological."""

    __slots__ = ("_ops", "__weakref__")

    def __init__(self):
        # each entry: (output Value, backward callable taking the output grad)
        self._ops = []

    def leaf(self, data) -> Value:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"leaf must be 1-D or 2-D, got shape {arr.shape}")
        return Value(arr, self)

    def scalar(self, x: float) -> Value:
        return Value(np.array([[float(x)]]), self)

    def _emit(self, data: np.ndarray, backward) -> Value:
        out = Value(data, self)
        self._ops.append((out, backward))
        return out

    def __len__(self):
        return len(self._ops)


def _acc(v: Value, g: np.ndarray):
    # never +=: v.grad may alias an upstream gradient array
    v.grad = g if v.grad is None else v.grad + g


def _same_tape(*vals: Value) -> Tape:
    tape = vals[0].tape
    for v in vals[1:]:
        if v.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def matmul(a: Value, b: Value) -> Value:
    tape = _same_tape(a, b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        _acc(a, g @ bd.T)
        _acc(b, ad.T @ g)

    return tape._emit(ad @ bd, bwd)


def transpose(x: Value) -> Value:
    def bwd(g):
        _acc(x, g.T)

    return x.tape._emit(x.data.T.copy(), bwd)


def add(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add: {x.data.shape} vs {y.data.shape}")

    def bwd(g):
        _acc(x, g)
        _acc(y, g)

    return tape._emit(x.data + y.data, bwd)


def sub(x: Value, y: Value) -> Value:
    tape = _same_tape(x, y)
    if x.data.shape != y.data.shape:
        raise ShapeError(f"sub: {x.data.shape} vs {y.data.shape}")

    def bwd(g):
        _acc(x, g)
        _acc(y, -g)

    return tape._emit(x.data - y.data, bwd)


def add_bias(x: Value, b: Value) -> Value:
    """x: m x n plus a 1 x n row vector broadcast over rows."""
    tape = _same_tape(x, b)
    if b.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"add_bias: {x.data.shape} with bias {b.data.shape}")

    def bwd(g):
        _acc(x, g)
        _acc(b, g.sum(axis=0, keepdims=True))

    return tape._emit(x.data + b.data, bwd)


def mul_scalar(x: Value, s) -> Value:
    """Multiply by a scalar: either a Python float (constant) or a 1x1 Value."""
    if isinstance(s, Value):
        tape = _same_tape(x, s)
        if s.data.shape != (1, 1):
            raise ShapeError(f"mul_scalar: scalar operand has shape {s.data.shape}")
        xd, sd = x.data, s.data

        def bwd(g):
            _acc(x, g * sd)
            _acc(s, np.array([[float((g * xd).sum())]]))

        return tape._emit(xd * sd, bwd)

    c = float(s)

    def bwd_const(g):
        _acc(x, g * c)

    return x.tape._emit(x.data * c, bwd_const)


def scale_cols(x: Value, s: Value) -> Value:
    """Elementwise product with a 1 x n row vector broadcast over rows;
    gradients flow to both operands."""
    tape = _same_tape(x, s)
    if s.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"scale_cols: {x.data.shape} with scale {s.data.shape}")
    xd, sd = x.data, s.data

    def bwd(g):
        _acc(x, g * sd)
        _acc(s, (g * xd).sum(axis=0, keepdims=True))

    return tape._emit(xd * sd, bwd)


def cmul(x: Value, c: np.ndarray) -> Value:
    """Elementwise product with a constant array of identical shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.data.shape:
        raise ShapeError(f"cmul: {x.data.shape} vs constant {c.shape}")

    def bwd(g):
        _acc(x, g * c)

    return x.tape._emit(x.data * c, bwd)


def cadd(x: Value, c) -> Value:
    """Add a constant (scalar or same-shape array); no gradient to the constant."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 0 and c.shape != x.data.shape:
        raise ShapeError(f"cadd: {x.data.shape} vs constant {c.shape}")

    def bwd(g):
        _acc(x, g)

    return x.tape._emit(x.data + c, bwd)


def relu(x: Value) -> Value:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        _acc(x, g * mask)

    return x.tape._emit(out, bwd)


# identical piecewise-linear map; named separately for its use in hinge losses
hinge = relu


def sigmoid(x: Value) -> Value:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _acc(x, g * out * (1.0 - out))

    return x.tape._emit(out, bwd)


def concat_cols(*xs: Value) -> Value:
    tape = _same_tape(*xs)
    m = xs[0].data.shape[0]
    for v in xs:
        if v.data.shape[0] != m:
            raise ShapeError(
                f"concat_cols: row counts differ ({v.data.shape} vs {xs[0].data.shape})"
            )
    widths = [v.data.shape[1] for v in xs]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for v, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _acc(v, g[:, lo:hi])

    return tape._emit(np.concatenate([v.data for v in xs], axis=1), bwd)


def mean_rows(x: Value) -> Value:
    """Column means: m x n -> 1 x n. Gradient distributes 1/m to each row."""
    m = x.data.shape[0]
    if m == 0:
        raise ShapeError("mean_rows: empty input")

    def bwd(g):
        _acc(x, np.repeat(g / m, m, axis=0))

    return x.tape._emit(x.data.mean(axis=0, keepdims=True), bwd)


def sum_all(x: Value) -> Value:
    """Sum of all entries -> 1 x 1 scalar."""
    shape = x.data.shape

    def bwd(g):
        _acc(x, np.full(shape, float(g[0, 0])))

    return x.tape._emit(np.array([[float(x.data.sum())]]), bwd)


def gather_rows(x: Value, adj) -> Value:
    """Rows of x indexed by the adjacency plan's edge centers."""

    def bwd(g):
        _acc(x, adj.sum_by_center(g))

    return x.tape._emit(x.data[adj.center], bwd)


def gather_rows_reversed(x: Value, adj) -> Value:
    """Rows of x indexed by the adjacency plan's edge neighbors."""

    def bwd(g):
        _acc(x, adj.sum_by_nbr(g))

    return x.tape._emit(x.data[adj.nbr], bwd)


def segment_mean_rows(e: Value, adj) -> Value:
    """Per-center mean over edge rows: (n_edges x d) -> (n_nodes x d)."""
    if e.data.shape[0] != adj.n_edges:
        raise ShapeError(
            f"segment_mean_rows: {e.data.shape[0]} rows for {adj.n_edges} edges"
        )
    inv_deg = adj.inv_deg

    def bwd(g):
        _acc(e, (g * inv_deg)[adj.center])

    return e.tape._emit(adj.sum_by_center(e.data) * inv_deg, bwd)


def backward(loss: Value):
    """Reverse sweep from a scalar loss.

    Clears intermediate grads on the tape first, so repeated calls
    accumulate cleanly into leaf grads only.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.data.shape}")
    ops = loss.tape._ops
    for out, _ in ops:
        out.grad = None
    loss.grad = np.ones((1, 1))
    for out, bwd in reversed(ops):
        if out.grad is not None:
            bwd(out.grad)
