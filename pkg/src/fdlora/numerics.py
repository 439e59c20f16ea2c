"""Dense matrices and a small reverse-mode autodiff tape.

Matrices are 2-D, C-contiguous float64 numpy arrays. The tape records every
operation applied to a :class:`Var`; plain arrays passed to an operation are
treated as constants and never receive a gradient, which is how frozen base
weights stay out of the gradient map.
"""
from dataclasses import dataclass

import numpy as np

from fdlora import kernels
from fdlora.errors import ContractError, InputError, NumericsError, ShapeError


def as_matrix(x, name="matrix"):
    """Return ``x`` as a finite 2-D float64 array (copying only if needed)."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D data, got {a.ndim}-D")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name}: empty shape {a.shape}")
    _check_finite(a, name)
    return a


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{what} produced non-finite values")


def _shape(a):
    return f"{a.shape[0]}x{a.shape[1]}"


def matmul(a, b):
    """Matrix product of two plain matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {_shape(a)} @ {_shape(b)}")
    out = kernels.matmul(a, b)
    _check_finite(out, "matmul")
    return out


@dataclass(frozen=True)
class LossValue:
    scalar: float
    per_example: np.ndarray


def _check_labels(labels, n, num_classes):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise InputError(f"{y.shape[0]} labels for {n} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        bad = y[(y < 0) | (y >= num_classes)][0]
        raise InputError(f"label {bad} outside [0, {num_classes})")
    return np.ascontiguousarray(y)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class (max-shifted)."""
    logits = as_matrix(logits, "logits")
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    losses, _ = kernels.softmax_xent(logits, y, 0.0)
    return LossValue(float(np.mean(losses)), losses)


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000  # so ndarray @ Var dispatches to Var.__rmatmul__

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return self.tape.transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Wengert list of primitive ops in topological (recording) order."""

    def __init__(self):
        self.ops = []
        self.parents = []
        self.values = []
        self.aux = []

    def __len__(self):
        return len(self.ops)

    def _push(self, op, parents, value, aux=None):
        _check_finite(value, op)
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.values.append(value)
        self.aux.append(aux)
        return Var(self, len(self.ops) - 1)

    def _unwrap(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("Var belongs to a different tape")
            return x.value, x.id
        return as_matrix(x), None

    def variable(self, value):
        """Record a leaf that will receive a gradient (copied, never aliased)."""
        return self._push("leaf", (), as_matrix(value).copy())

    def matmul(self, a, b):
        av, ai = self._unwrap(a)
        bv, bi = self._unwrap(b)
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {_shape(av)} @ {_shape(bv)}")
        consts = (av if ai is None else None, bv if bi is None else None)
        return self._push("matmul", (ai, bi), kernels.matmul(av, bv), consts)

    def add(self, a, b):
        av, ai = self._unwrap(a)
        bv, bi = self._unwrap(b)
        if av.shape == bv.shape:
            return self._push("add", (ai, bi), av + bv)
        if bv.shape[0] == 1 and bv.shape[1] == av.shape[1]:
            return self._push("add_row", (ai, bi), av + bv)
        raise ShapeError(f"add shape mismatch: {_shape(av)} + {_shape(bv)}")

    def mul(self, a, b):
        """Element-wise product, or scaling when ``b`` is a Python number."""
        if isinstance(b, (int, float)):
            av, ai = self._unwrap(a)
            return self._push("scale", (ai,), av * float(b), float(b))
        av, ai = self._unwrap(a)
        bv, bi = self._unwrap(b)
        if av.shape != bv.shape:
            raise ShapeError(f"mul shape mismatch: {_shape(av)} * {_shape(bv)}")
        consts = (av if ai is None else None, bv if bi is None else None)
        return self._push("mul", (ai, bi), av * bv, consts)

    def transpose(self, a):
        av, ai = self._unwrap(a)
        return self._push("transpose", (ai,), np.ascontiguousarray(av.T))

    def tanh(self, a):
        av, ai = self._unwrap(a)
        return self._push("tanh", (ai,), np.tanh(av))

    def relu(self, a):
        av, ai = self._unwrap(a)
        return self._push("relu", (ai,), np.maximum(av, 0.0))

    def sum(self, a):
        av, ai = self._unwrap(a)
        return self._push("sum", (ai,), np.array([[av.sum()]]))

    def cross_entropy(self, logits, labels):
        lv, li = self._unwrap(logits)
        y = _check_labels(labels, lv.shape[0], lv.shape[1])
        losses, grad = kernels.softmax_xent(lv, y, 1.0 / lv.shape[0])
        node = self._push("xent", (li,), np.array([[losses.mean()]]), grad)
        node_loss = LossValue(float(losses.mean()), losses)
        return node, node_loss


def _accumulate(adj, i, g):
    if i is None:
        return
    if adj[i] is None:
        adj[i] = g
    else:
        adj[i] = adj[i] + g


def backward(tape, root):
    """Reverse sweep from a scalar node.

    Returns a dict node-id -> gradient of ``root`` for every node recorded up
    to and including ``root``. Constants were never recorded, so they have no
    entry.
    """
    rid = root.id if isinstance(root, Var) else int(root)
    if not 0 <= rid < len(tape):
        raise ContractError(f"node {rid} is not on this tape")
    if tape.values[rid].shape != (1, 1):
        raise ContractError(
            f"backward needs a scalar root, node {rid} is {_shape(tape.values[rid])}"
        )
    adj = [None] * (rid + 1)
    adj[rid] = np.ones((1, 1))
    for i in range(rid, -1, -1):
        g = adj[i]
        if g is None:
            continue
        op = tape.ops[i]
        ps = tape.parents[i]
        if op == "leaf":
            continue
        if op == "matmul":
            a, b = ps
            if a is not None:
                bt = np.ascontiguousarray(_operand(tape, i, 1).T)
                _accumulate(adj, a, kernels.matmul(g, bt))
            if b is not None:
                at = np.ascontiguousarray(_operand(tape, i, 0).T)
                _accumulate(adj, b, kernels.matmul(at, g))
        elif op == "add":
            _accumulate(adj, ps[0], g)
            _accumulate(adj, ps[1], g)
        elif op == "add_row":
            _accumulate(adj, ps[0], g)
            _accumulate(adj, ps[1], g.sum(axis=0, keepdims=True))
        elif op == "scale":
            _accumulate(adj, ps[0], g * tape.aux[i])
        elif op == "mul":
            a, b = ps
            if a is not None:
                _accumulate(adj, a, g * _operand(tape, i, 1))
            if b is not None:
                _accumulate(adj, b, g * _operand(tape, i, 0))
        elif op == "transpose":
            _accumulate(adj, ps[0], np.ascontiguousarray(g.T))
        elif op == "tanh":
            y = tape.values[i]
            _accumulate(adj, ps[0], g * (1.0 - y * y))
        elif op == "relu":
            _accumulate(adj, ps[0], g * (tape.values[i] > 0.0))
        elif op == "sum":
            src = ps[0]
            if src is not None:
                _accumulate(adj, src, np.full(tape.values[src].shape, g[0, 0]))
        elif op == "xent":
            _accumulate(adj, ps[0], tape.aux[i] * g[0, 0])
        else:  # pragma: no cover
            raise ContractError(f"unknown op {op!r}")
    return {
        i: (a if a is not None else np.zeros_like(tape.values[i]))
        for i, a in enumerate(adj)
    }


# Constant operands of binary ops are kept in ``aux`` at record time.
def _operand(tape, i, pos):
    p = tape.parents[i][pos]
    return tape.values[p] if p is not None else tape.aux[i][pos]
