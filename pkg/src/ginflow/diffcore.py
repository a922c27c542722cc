"""Small reverse-mode autodiff over dense float64 numpy arrays.

A :class:`Graph` records every op applied to its tensors in creation order,
which is already a topological order, so the backward pass is a single
reverse sweep. Graphs are rebuilt for every batch and thrown away.

Broadcasting is deliberately limited to ``matrix + row-vector`` (bias add);
everything else must agree in shape.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where it must not."""

    def __init__(self, message: str, block: int | None = None):
        super().__init__(message)
        self.block = block


class BackwardError(RuntimeError):
    """Misuse of :meth:`Graph.backward`."""


class Tensor:
    """A node in a :class:`Graph`.

    ``value`` is a C-contiguous float64 array (row-major), never mutated after
    creation. ``grad`` is filled in by :meth:`Graph.backward`.
    """

    __slots__ = ("graph", "value", "op", "inputs", "ctx", "grad", "name")

    def __init__(self, graph, value, op="const", inputs=(), ctx=None, name=None):
        self.graph = graph
        self.value = value
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Values flattened in row-major order."""
        return self.value.ravel()

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # operator sugar, all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(self.graph.lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Dynamic computation graph.

    With ``record=False`` nothing is retained for backpropagation, so
    intermediates are freed as soon as they go out of scope. Use it for
    evaluation on large arrays.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self._backward_done = False

    def _new(self, value, op, inputs, ctx=None, name=None) -> Tensor:
        if not self.record:
            return Tensor(self, value, op, (), None, name)
        t = Tensor(self, value, op, tuple(inputs), ctx, name)
        self.nodes.append(t)
        return t

    def constant(self, value) -> Tensor:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        return self._new(arr, "const", ())

    def param(self, name: str, value) -> Tensor:
        """Register a named leaf whose gradient is reported by :meth:`backward`."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        t = self._new(arr, "param", (), name=name)
        self.params[name] = t
        return t

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise ValueError("tensor belongs to a different graph")
            return x
        return self.constant(x)

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None
        self._backward_done = False

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node; return parameter gradients.

        Parameters not reachable from ``loss`` get a zero gradient. Calling
        twice without :meth:`zero_grad` raises :class:`BackwardError`.
        """
        if not self.record:
            raise BackwardError("graph was built with record=False")
        if loss.graph is not self:
            raise BackwardError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
        if self._backward_done:
            raise BackwardError("backward already ran on this graph; call zero_grad() first")
        self._backward_done = True

        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or not node.inputs:
                continue
            in_grads = BACKWARD_RULES[node.op](node, node.grad)
            for inp, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self.params.items()
        }


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, a.graph.lift(b)
    if isinstance(b, Tensor):
        return b.graph.lift(a), b
    raise TypeError("at least one operand must be a Tensor")


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a.graph._new(a.value @ b.value, "matmul", (a, b))


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` with a row-vector bias."""
    x, w = _pair(x, w)
    b = x.graph.lift(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match {w.shape}")
    out = x.value @ w.value
    out += b.value
    return x.graph._new(out, "linear", (x, w, b))


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape == b.shape:
        return a.graph._new(a.value + b.value, "add", (a, b))
    if a.value.ndim == 2 and b.value.ndim == 1 and b.shape[0] == a.shape[1]:
        return a.graph._new(a.value + b.value, "add_bias", (a, b))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return a.graph._new(a.value * b.value, "mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph._new(a.value * c, "scale", (a,), c)


def neg(a: Tensor) -> Tensor:
    return a.graph._new(-a.value, "neg", (a,))


def relu(a: Tensor) -> Tensor:
    return a.graph._new(np.maximum(a.value, 0.0), "relu", (a,))


def tanh(a: Tensor) -> Tensor:
    return a.graph._new(np.tanh(a.value), "tanh", (a,))


def exp(a: Tensor) -> Tensor:
    return a.graph._new(np.exp(a.value), "exp", (a,))


def log(a: Tensor) -> Tensor:
    return a.graph._new(np.log(a.value), "log", (a,))


def reciprocal(a: Tensor) -> Tensor:
    return a.graph._new(1.0 / a.value, "reciprocal", (a,))


def elementwise(kind: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name: add, mul, relu, tanh, exp, log, reciprocal, neg, scale."""
    if kind in ("add", "mul"):
        return _BINARY[kind](*inputs)
    if kind == "scale":
        (a,) = inputs
        return scale(a, 1.0 if c is None else c)
    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    (a,) = inputs
    return _UNARY[kind](a)


def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    nd = a.value.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for rank {nd}")
    return axis % nd


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(a, axis)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    return a.graph._new(np.asarray(out, dtype=np.float64), "sum", (a,), (axis, keepdims))


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(a, axis)
    out = np.mean(a.value, axis=axis, keepdims=keepdims)
    return a.graph._new(np.asarray(out, dtype=np.float64), "mean", (a,), (axis, keepdims))


def reduce(kind: str, a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis, keepdims)
    if kind == "mean":
        return reduce_mean(a, axis, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` along the last axis (copied)."""
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}:{stop}] out of bounds for width {n}")
    return a.graph._new(a.value[..., start:stop].copy(), "slice", (a,), (start, stop))


def split(a: Tensor, ranges: Sequence[tuple[int, int]]) -> list[Tensor]:
    return [slice_cols(a, lo, hi) for lo, hi in ranges]


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat of nothing")
    g = parts[0].graph
    parts = [g.lift(p) for p in parts]
    nd = parts[0].value.ndim
    axis = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.value.ndim != nd or any(
            p.shape[i] != ref[i] for i in range(nd) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} disagree off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return g._new(out, "concat", parts, (axis, sizes))


def take_cols(a: Tensor, index) -> Tensor:
    """Gather columns by integer index (used for fixed permutations)."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]
    if index.ndim != 1 or (index.size and (index.min() < -n or index.max() >= n)):
        raise DimensionError("take_cols: index out of bounds")
    unique = len(np.unique(index)) == len(index)
    return a.graph._new(a.value[..., index], "take", (a,), (index, unique))


def check_finite(a: Tensor, what: str = "tensor", block: int | None = None) -> Tensor:
    if not np.all(np.isfinite(a.value)):
        where = f" in block {block}" if block is not None else ""
        raise NumericError(f"non-finite values in {what}{where}", block=block)
    return a


# ---------------------------------------------------------------------------
# gradient rules: rule(node, upstream_grad) -> tuple of input grads


def _g_matmul(node, g):
    a, b = node.inputs
    return g @ b.value.T, a.value.T @ g


def _col_sum(g):
    # ones-vector product; much faster than sum(axis=0) on tall arrays
    return np.ones(g.shape[0]) @ g


def _g_linear(node, g):
    x, w, _ = node.inputs
    return g @ w.value.T, x.value.T @ g, _col_sum(g)


def _g_add(node, g):
    return g, g


def _g_add_bias(node, g):
    return g, _col_sum(g)


def _g_mul(node, g):
    a, b = node.inputs
    return g * b.value, g * a.value


def _g_scale(node, g):
    return (g * node.ctx,)


def _g_neg(node, g):
    return (-g,)


def _g_relu(node, g):
    (a,) = node.inputs
    return (g * (a.value > 0.0),)


def _g_tanh(node, g):
    return (g * (1.0 - node.value * node.value),)


def _g_exp(node, g):
    return (g * node.value,)


def _g_log(node, g):
    (a,) = node.inputs
    return (g / a.value,)


def _g_reciprocal(node, g):
    return (-g * node.value * node.value,)


def _expand_reduced(node, g):
    (a,) = node.inputs
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _g_sum(node, g):
    return (np.array(_expand_reduced(node, g)),)


def _g_mean(node, g):
    (a,) = node.inputs
    axis, _ = node.ctx
    n = a.value.size if axis is None else a.shape[axis]
    return (_expand_reduced(node, g) / n,)


def _g_slice(node, g):
    (a,) = node.inputs
    start, stop = node.ctx
    out = np.zeros_like(a.value)
    out[..., start:stop] = g
    return (out,)


def _g_concat(node, g):
    axis, sizes = node.ctx
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _g_take(node, g):
    (a,) = node.inputs
    out = np.zeros_like(a.value)
    index, unique = node.ctx
    if unique:
        out[..., index] = g
    else:
        np.add.at(out, (Ellipsis, index), g)
    return (out,)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _g_matmul,
    "linear": _g_linear,
    "add": _g_add,
    "add_bias": _g_add_bias,
    "mul": _g_mul,
    "scale": _g_scale,
    "neg": _g_neg,
    "relu": _g_relu,
    "tanh": _g_tanh,
    "exp": _g_exp,
    "log": _g_log,
    "reciprocal": _g_reciprocal,
    "sum": _g_sum,
    "mean": _g_mean,
    "slice": _g_slice,
    "concat": _g_concat,
    "take": _g_take,
}

_UNARY = {
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "reciprocal": reciprocal,
    "neg": neg,
}
_BINARY = {"add": add, "mul": mul}


@contextmanager
def corrupted_rule(op: str, factor: float = 1.5):
    """Temporarily scale the gradient rule of ``op`` by ``factor``.

    Fault injection for the gradient checker: a correct checker must notice.
    """
    original = BACKWARD_RULES[op]

    def broken(node, g):
        return tuple(None if x is None else x * factor for x in original(node, g))

    BACKWARD_RULES[op] = broken
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    f: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f(graph, tensors)`` must build a scalar loss from the parameter tensors.
    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-8 < eps < 1e-3:
        raise ValueError(f"eps must lie in (1e-8, 1e-3), got {eps}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values, record):
        g = Graph(record=record)
        tensors = {k: g.param(k, v) for k, v in values.items()}
        loss = f(g, tensors)
        if not np.all(np.isfinite(loss.value)):
            raise NumericError("non-finite loss during gradient check")
        return g, loss

    g, loss = evaluate(params, True)
    for node in g.nodes:
        if not np.all(np.isfinite(node.value)):
            raise NumericError(f"non-finite intermediate in op {node.op!r}")
    analytic = g.backward(loss)

    worst = 0.0
    for name in names if names is not None else params:
        base = params[name]
        flat = base.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(evaluate(params, False)[1].value)
            flat[i] = orig - eps
            down = float(evaluate(params, False)[1].value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(grad[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
