"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its parents and a closure that maps the upstream
gradient to gradients of the parents. ``Graph`` wraps a python callable so a
model can be evaluated by name, differentiated with respect to any named leaf
(parameters *and* inputs), and checked against central differences.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphStateError(RuntimeError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting introduced or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes are created by the operations
    below. ``grad`` is populated by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, name: Optional[str] = None, _parents=(), _op: str = "leaf"):
        arr = _as_array(data)
        # a sum is non-finite iff some entry is (barring overflow near 1e308)
        if not np.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite value produced by '{_op}'")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    # operator sugar, all routed through the primitives
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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


def tensor(value, name: Optional[str] = None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, name=name)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data, _parents=parents, _op=op)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(x, w) -> Tensor:
    """Matrix product contracting the last axis of ``x`` with the first of ``w``."""
    x, w = tensor(x), tensor(w)
    if w.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {x.shape} @ {w.shape}")

    def backward(g):
        gx = g @ w.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = x2.T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _make(x.data @ w.data, (x, w), backward, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` over the last axis, as a single node."""
    x, weight, bias = tensor(x), tensor(weight), tensor(bias)
    if weight.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine shape mismatch: {x.shape} @ {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        return g @ weight.data.T, gw, _unbroadcast(g, bias.shape)

    return _make(out, (x, weight, bias), backward, "affine")


def sigmoid(x) -> Tensor:
    x = tensor(x)
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x) -> Tensor:
    """``log(1 + e^x)``, evaluated without overflow."""
    x = tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _make(out, (x,), backward, "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def exp(x) -> Tensor:
    x = tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x) -> Tensor:
    x = tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), backward, "concat")


def maximum(a, b) -> Tensor:
    """Elementwise max; exact ties split the gradient evenly."""
    a, b = tensor(a), tensor(b)
    out = np.maximum(a.data, b.data)

    def backward(g):
        wa = (a.data > b.data) + 0.5 * (a.data == b.data)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * (1.0 - wa), b.shape)

    return _make(out, (a, b), backward, "maximum")


def amax(x, axis: int) -> Tensor:
    """Max reduction along ``axis``; tied maxima share the gradient evenly."""
    x = tensor(x)
    out = x.data.max(axis=axis)

    def backward(g):
        hit = (x.data == np.expand_dims(out, axis)).astype(np.float64)
        hit /= hit.sum(axis=axis, keepdims=True)
        return (hit * np.expand_dims(g, axis),)

    return _make(out, (x,), backward, "amax")


def clamp(x, lo=-np.inf, hi=np.inf) -> Tensor:
    x = tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def take(x, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (drops that axis)."""
    x = tensor(x)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(out, (x,), backward, "take")


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------------------
# named-graph wrapper

GradientMap = Dict[str, np.ndarray]


class Graph:
    """A differentiable function with named inputs and named parameters.

    ``fn(inputs, params)`` receives two dicts of leaf tensors and returns a
    dict of output tensors. Parameter values live on the graph; inputs are
    bound per call to :meth:`forward`.
    """

    def __init__(
        self,
        fn: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Mapping[str, Tensor]],
        input_shapes: Mapping[str, tuple],
        params: Optional[Mapping[str, np.ndarray]] = None,
    ):
        self.fn = fn
        self.input_shapes = {k: tuple(v) for k, v in input_shapes.items()}
        self.params = {k: _as_array(v) for k, v in (params or {}).items()}
        self._leaves: Dict[str, Tensor] = {}
        self._outputs: Optional[Dict[str, Tensor]] = None

    def forward(self, inputs: Mapping[str, object]) -> Dict[str, np.ndarray]:
        missing = set(self.input_shapes) - set(inputs)
        if missing:
            raise ShapeError(f"unbound graph inputs: {sorted(missing)}")
        leaves: Dict[str, Tensor] = {}
        for name, shape in self.input_shapes.items():
            arr = _as_array(inputs[name])
            if arr.shape != shape:
                raise ShapeError(f"input {name!r} has shape {arr.shape}, expected {shape}")
            leaves[name] = Tensor(arr, name=name)
        param_leaves = {k: Tensor(v, name=k) for k, v in self.params.items()}
        outputs = self.fn(leaves, param_leaves)
        leaves.update(param_leaves)
        self._leaves = leaves
        self._outputs = dict(outputs)
        return {k: v.data.copy() for k, v in self._outputs.items()}

    def backward(self, output: str) -> GradientMap:
        if self._outputs is None:
            raise GraphStateError("backward() called before forward()")
        node = self._outputs[output]
        if node.data.size != 1:
            raise ShapeError(f"output {output!r} is not scalar: shape {node.shape}")
        node.backward()
        return {
            name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in self._leaves.items()
        }


def finite_difference_check(
    graph: Graph,
    inputs: Mapping[str, object],
    leaf: str,
    output: str,
    h: float = 1e-5,
) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    graph.forward(inputs)
    analytic = graph.backward(output)[leaf]

    is_param = leaf in graph.params
    base = (graph.params[leaf] if is_param else _as_array(inputs[leaf])).copy()

    def evaluate(value: np.ndarray) -> float:
        if is_param:
            saved = graph.params[leaf]
            graph.params[leaf] = value
            try:
                return float(graph.forward(inputs)[output].reshape(-1)[0])
            finally:
                graph.params[leaf] = saved
        bound = dict(inputs)
        bound[leaf] = value
        return float(graph.forward(bound)[output].reshape(-1)[0])

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    graph.forward(inputs)
    return worst


def grad(fn: Callable[..., Tensor], *values: Iterable) -> list:
    """Gradients of scalar ``fn(*leaves)`` with respect to each positional argument."""
    leaves = [Tensor(v) for v in values]
    out = fn(*leaves)
    out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
