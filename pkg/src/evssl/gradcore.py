"""A small fp64 tensor engine with tape-based reverse-mode differentiation.

Usage::

    tape = Tape()
    w = tape.param(np.ones((3, 2)))
    x = constant(np.eye(3))
    loss = sum_(matmul(x, w))
    grads = tape.backward(loss)      # {w.id: array}

Tensors without a tape are constants; an op records itself only when one of
its inputs requires a gradient, so a forward pass over constants (the momentum
branch) leaves no trace.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NonScalarRoot, ShapeMismatch

EPS = 1e-12

_ids = itertools.count()


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad")

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False):
        v = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite tensor value")
        v.setflags(write=False)
        self.value = v
        self.tape = tape
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(value) -> Tensor:
    return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations. Single-writer."""

    def __init__(self):
        self.records: list[tuple[int, tuple[Tensor, ...], Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def param(self, value) -> Tensor:
        t = Tensor(value, self, requires_grad=True)
        self.leaves[t.id] = t
        return t

    def reset(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self.consumed = False

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` with respect to every leaf parameter."""
        if root.value.size != 1:
            raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed; call reset()")
        grads: dict[int, np.ndarray] = {}
        if root.requires_grad and root.tape is self:
            grads[root.id] = np.ones_like(root.value)
        for out_id, inputs, vjp in reversed(self.records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        self.consumed = True
        return {i: grads.get(i, np.zeros_like(t.value)) for i, t in self.leaves.items()}


def backward(root: Tensor) -> dict[int, np.ndarray]:
    if root.tape is None:
        raise NonScalarRoot("root does not depend on any parameter")
    return root.tape.backward(root)


def _op(value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tapes = {t.tape for t in inputs if t.requires_grad}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ValueError("inputs recorded on different tapes")
    tape = tapes.pop()
    out = Tensor(value, tape, requires_grad=True)
    tape.records.append((out.id, tuple(inputs), vjp))
    return out


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _op(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose needs a matrix")
    return _op(a.value.T.copy(), (a,), lambda g: (g.T,))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _op(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _op(
        a.value.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.value)
        except FloatingPointError:
            raise DomainError("exp overflow") from None
    return _op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of non-positive value")
    return _op(np.log(av), (a,), lambda g: (g / av,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def broadcast_add_row(m: Tensor, row: Tensor) -> Tensor:
    """Add a length-k vector to every row of an (n, k) matrix."""
    if m.value.ndim != 2 or row.shape != (m.shape[1],):
        raise ShapeMismatch(f"broadcast_add_row: {m.shape} + {row.shape}")
    return _op(m.value + row.value, (m, row), lambda g: (g, g.sum(axis=0)))


def scale_rows(m: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of an (n, k) matrix by s[i]."""
    if m.value.ndim != 2 or s.shape != (m.shape[0],):
        raise ShapeMismatch(f"scale_rows: {m.shape} by {s.shape}")
    mv, sv = m.value, s.value
    return _op(mv * sv[:, None], (m, s), lambda g: (g * sv[:, None], (g * mv).sum(axis=1)))


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Vector of dot products between matching rows of two (n, k) matrices."""
    _same_shape(a, b, "rowwise_dot")
    if a.value.ndim != 2:
        raise ShapeMismatch("rowwise_dot needs matrices")
    av, bv = a.value, b.value
    return _op((av * bv).sum(axis=1), (a, b), lambda g: (g[:, None] * bv, g[:, None] * av))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_rows of nothing")
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeMismatch(f"concat_rows: trailing shapes {widths}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _op(
        np.concatenate([p.value for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeMismatch(f"slice_rows [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _op(a.value[start:stop].copy(), (a,), vjp)


def gather_rows(m: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if m.value.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= m.shape[0])):
        raise ShapeMismatch(f"gather_rows: bad indices for {m.shape}")
    shape = m.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _op(m.value[idx], (m,), vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 1:
        raise ShapeMismatch("dot needs vectors")
    _same_shape(a, b, "dot")
    av, bv = a.value, b.value
    return _op(av @ bv, (a, b), lambda g: (g * bv, g * av))


def l2_normalize(a: Tensor) -> Tensor:
    """Unit-normalize a vector, or each row of a matrix."""
    av = a.value
    if av.ndim not in (1, 2):
        raise ShapeMismatch("l2_normalize needs a vector or matrix")
    norm = np.linalg.norm(av, axis=-1, keepdims=True)
    if np.any(norm < EPS):
        raise DomainError("cannot normalize a near-zero vector")
    u = av / norm

    def vjp(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norm,)

    return _op(u, (a,), vjp)


def softmax_rows(m: Tensor) -> Tensor:
    if m.value.ndim != 2:
        raise ShapeMismatch("softmax_rows needs a matrix")
    z = m.value - m.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _op(s, (m,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def log_softmax_rows(m: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    if m.value.ndim != 2:
        raise ShapeMismatch("log_softmax_rows needs a matrix")
    z = m.value - m.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _op(out, (m,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} to {shape}") from None
    return _op(out.copy(), (a,), lambda g: (g.reshape(old),))
