"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation allocates a new Tensor node holding its value and a closure
that routes the output gradient back to its parents. Calling backprop() on a
scalar node walks the tape in reverse topological order. The op set is exactly
what the routing pipeline needs; there is no broadcasting beyond what the ops
below use themselves.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction and execution failures."""


class ShapeError(AutodiffError):
    """Operands with incompatible shapes; message names the offending op."""


class NumericalError(AutodiffError):
    """A node produced NaN or Inf; message names the offending op."""


# Optional kink recorder: while active, relu/abs/clamp_min append the distance
# of their inputs to the nearest non-differentiable point. Finite-difference
# harnesses use this to reject base points too close to a kink.
_KINK_TRACE: list[float] | None = None


@contextmanager
def record_kinks() -> Iterator[list[float]]:
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _note_kink(margin: float) -> None:
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(float(margin))


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            where = f" '{name}'" if name else ""
            raise NumericalError(f"{_op}: non-finite values in tensor{where}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(data, name: str | None = None) -> Tensor:
    """A leaf that never receives a gradient."""
    return Tensor(data, requires_grad=False, name=name)


def param(name: str, data, frozen: bool = False) -> Tensor:
    """A named leaf; frozen parameters keep requires_grad False."""
    return Tensor(data, requires_grad=not frozen, name=name)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return const(value)


def _tracks(t: Tensor) -> bool:
    # Gradients are accumulated on interior nodes and on trainable leaves.
    return t.requires_grad or bool(t._parents)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _tracks(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _node(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    return Tensor(data, _parents=parents, _backward=backward, _op=op)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    return _node("add", data, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(out: Tensor) -> None:
        _accum(a, -out.grad)

    return _node("neg", -a.data, (a,), backward)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _node("mul", data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(out: Tensor) -> None:
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _node("matmul", a.data @ b.data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def relu(a) -> Tensor:
    a = _lift(a)
    if a.data.size:
        _note_kink(float(np.min(np.abs(a.data))))
    mask = a.data > 0.0

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * mask)

    return _node("relu", np.maximum(a.data, 0.0), (a,), backward)


def abs_(a) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is defined as 0."""
    a = _lift(a)
    if a.data.size:
        _note_kink(float(np.min(np.abs(a.data))))
    sign = np.sign(a.data)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * sign)

    return _node("abs", np.abs(a.data), (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero where the floor binds."""
    a = _lift(a)
    if a.data.size:
        _note_kink(float(np.min(np.abs(a.data - floor))))
    mask = a.data > floor

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * mask)

    return _node("clamp_min", np.maximum(a.data, floor), (a,), backward)


def sqrt(a) -> Tensor:
    a = _lift(a)
    data = np.sqrt(a.data)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * 0.5 / data)

    return _node("sqrt", data, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad * data)

    return _node("exp", data, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad / a.data)

    return _node("log", np.log(a.data), (a,), backward)


def log1p(a) -> Tensor:
    a = _lift(a)

    def backward(out: Tensor) -> None:
        _accum(a, out.grad / (1.0 + a.data))

    return _node("log1p", np.log1p(a.data), (a,), backward)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction for numerical stability."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: expects a 2-d operand, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(out: Tensor) -> None:
        gy = out.grad
        _accum(a, y * (gy - (gy * y).sum(axis=1, keepdims=True)))

    return _node("softmax_rows", y, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expects a 2-d operand, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - logz

    def backward(out: Tensor) -> None:
        gy = out.grad
        _accum(a, gy - np.exp(y) * gy.sum(axis=1, keepdims=True))

    return _node("log_softmax_rows", y, (a,), backward)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-d operand, got {a.shape}")

    def backward(out: Tensor) -> None:
        _accum(a, out.grad.T)

    return _node("transpose", a.data.T.copy(), (a,), backward)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(out: Tensor) -> None:
        for p, g in zip(parts, np.split(out.grad, splits, axis=axis)):
            _accum(p, g)

    return _node("concat", data, tuple(parts), backward)


def col(a, j: int) -> Tensor:
    """Column j of a 2-d tensor, kept as a (rows, 1) slice."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"col: expects a 2-d operand, got {a.shape}")
    if not 0 <= j < a.shape[1]:
        raise ShapeError(f"col: index {j} out of range for shape {a.shape}")

    def backward(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[:, j : j + 1] = out.grad
        _accum(a, g)

    return _node("col", a.data[:, j : j + 1].copy(), (a,), backward)


def sum_all(a) -> Tensor:
    a = _lift(a)
    shape = a.data.shape

    def backward(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad, shape).copy())

    return _node("sum", np.sum(a.data), (a,), backward)


def mean_all(a) -> Tensor:
    a = _lift(a)
    size = a.data.size
    if size == 0:
        raise ShapeError("mean: empty operand")
    shape = a.data.shape

    def backward(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad / size, shape).copy())

    return _node("mean", np.mean(a.data), (a,), backward)


def sum_rows(a) -> Tensor:
    """Sum over axis 0 of a 2-d tensor, result shape (1, cols)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"sum_rows: expects a 2-d operand, got {a.shape}")
    rows = a.shape[0]

    def backward(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad, (rows, a.shape[1])).copy())

    return _node("sum_rows", np.sum(a.data, axis=0, keepdims=True), (a,), backward)


def mean_rows(a) -> Tensor:
    """Mean over axis 0 of a 2-d tensor, result shape (1, cols)."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"mean_rows: expects a 2-d operand, got {a.shape}")
    rows = a.shape[0]
    if rows == 0:
        raise ShapeError("mean_rows: empty operand")

    def backward(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad / rows, (rows, a.shape[1])).copy())

    return _node("mean_rows", np.mean(a.data, axis=0, keepdims=True), (a,), backward)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion would overflow on long loss chains.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into .grad over the tape of `output`."""
    if output.data.shape != ():
        raise AutodiffError(f"backprop: output must be scalar, got shape {output.shape}")
    order = _topo_order(output)
    output.grad = np.ones(())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


@dataclass
class Graph:
    """A callable computation with named parameter leaves.

    build(params, inputs) must return a scalar or array Tensor assembled from
    the parameter tensors in `params` and constant tensors lifted from
    `inputs`. Frozen parameters are leaves with requires_grad False.
    """

    build: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Tensor]
    params: dict[str, Tensor]
    input_shapes: dict[str, tuple[int, ...]] | None = None
    nondiff_guard: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], list[str]] | None = None
    _output: Tensor | None = field(default=None, repr=False)


def forward(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None) -> Tensor:
    """Run the graph on `inputs`, keeping the output for a later backward."""
    inputs = dict(inputs or {})
    lifted = {k: _lift(v) for k, v in inputs.items()}
    if graph.input_shapes is not None:
        for key, shape in graph.input_shapes.items():
            if key not in lifted:
                raise ShapeError(f"forward: missing input '{key}'")
            if lifted[key].shape != tuple(shape):
                raise ShapeError(
                    f"forward: input '{key}' has shape {lifted[key].shape}, expected {tuple(shape)}"
                )
    graph._output = graph.build(graph.params, lifted)
    return graph._output


def backward(graph: Graph) -> dict[str, Tensor]:
    """Gradients of the last forward output with respect to every parameter.

    Frozen parameters map to exact zeros.
    """
    if graph._output is None:
        raise AutodiffError("backward: called before forward")
    for p in graph.params.values():
        p.zero_grad()
    backprop(graph._output)
    grads: dict[str, Tensor] = {}
    for name, p in graph.params.items():
        if p.requires_grad and p.grad is not None:
            grads[name] = const(p.grad.copy(), name=f"grad:{name}")
        else:
            grads[name] = const(np.zeros_like(p.data), name=f"grad:{name}")
    return grads


@dataclass
class ParamCheck:
    name: str
    n_entries: int
    max_rel_err: float
    passed: bool
    skipped: bool = False


@dataclass
class GradCheckReport:
    checks: list[ParamCheck]
    flags: list[str]
    step: float
    tolerance: float

    @property
    def excluded(self) -> bool:
        return bool(self.flags)

    @property
    def max_rel_err(self) -> float:
        errs = [c.max_rel_err for c in self.checks if not c.skipped]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _rel_err(a: float, n: float) -> float:
    # Unit floor keeps near-zero gradients from blowing up the ratio.
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def finite_difference_check(graph: Graph, inputs: Mapping[str, np.ndarray] | None = None,
                            step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central differences entry by entry.

    Relative error uses a unit floor: |a - n| / max(|a|, |n|, 1). If the
    graph's nondiff_guard flags the base point (a routing tie, say), the
    checks are excluded and the flags are reported instead.
    """
    inputs = dict(inputs or {})
    if graph.nondiff_guard is not None:
        lifted = {k: _lift(v) for k, v in inputs.items()}
        flags = graph.nondiff_guard(graph.params, lifted)
        if flags:
            return GradCheckReport(checks=[], flags=list(flags), step=step, tolerance=tolerance)

    forward(graph, inputs)
    analytic = {name: g.data for name, g in backward(graph).items()}

    checks: list[ParamCheck] = []
    for name, p in graph.params.items():
        if not p.requires_grad:
            frozen_zero = not np.any(analytic[name])
            checks.append(ParamCheck(name=name, n_entries=p.data.size,
                                     max_rel_err=0.0, passed=frozen_zero, skipped=True))
            continue
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(forward(graph, inputs).data)
            flat[i] = keep - step
            lo = float(forward(graph, inputs).data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[i]), numeric))
        checks.append(ParamCheck(name=name, n_entries=flat.size,
                                 max_rel_err=worst, passed=worst < tolerance))
    return GradCheckReport(checks=checks, flags=[], step=step, tolerance=tolerance)
