"""Dense float64 tensors, a static reverse-mode graph, and a masked SGD step.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Graph`
records nodes in construction order (which is therefore a topological order);
:func:`evaluate` runs the forward pass and caches every intermediate value, and
:func:`gradient` walks the tape backwards and accumulates into a
:class:`ParamStore`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray


class NumericsError(Exception):
    """Base error for the tensor engine."""


class ShapeError(NumericsError):
    def __init__(self, node: "Node", message: str):
        self.node = node
        super().__init__(f"node #{node.index} ({node.op.name}): {message}")


def as_tensor(value) -> Tensor:
    return np.array(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter store


@dataclass
class _Entry:
    value: Tensor
    grad: Tensor
    start: int

    @property
    def stop(self) -> int:
        return self.start + self.value.size


class ParamStore:
    """Named float64 parameters laid out on one contiguous global index range.

    Parameters are indexed in insertion order, each flattened row-major, so
    entry ``name`` owns global indices ``[start, start + size)``.
    """

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self.total_count = 0
        self.trainable = True

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64, order="C", copy=True)
        self._entries[name] = _Entry(arr, np.zeros_like(arr), self.total_count)
        self.total_count += arr.size

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def value(self, name: str) -> Tensor:
        return self._entries[name].value

    def grad(self, name: str) -> Tensor:
        return self._entries[name].grad

    def index_range(self, name: str) -> tuple[int, int]:
        e = self._entries[name]
        return e.start, e.stop

    def set_value(self, name: str, value) -> None:
        e = self._entries[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != e.value.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {e.value.shape}")
        e.value[...] = arr

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad.fill(0.0)

    def flat_values(self) -> Tensor:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([e.value.ravel() for e in self._entries.values()])

    def flat_grad(self) -> Tensor:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([e.grad.ravel() for e in self._entries.values()])

    def items(self):
        for name, e in self._entries.items():
            yield name, e.value

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, e in self._entries.items():
            out.add(name, e.value)
            out._entries[name].grad[...] = e.grad
        out.trainable = self.trainable
        return out

    def to_bytes(self) -> bytes:
        """Raw little-endian bytes of every value, for bit-level comparisons."""
        return b"".join(e.value.astype("<f8").tobytes() for e in self._entries.values())

    def bit_equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and self.to_bytes() == other.to_bytes()

    def segments(self, indices: np.ndarray):
        """Split sorted global indices into ``(entry, local_indices)`` pairs."""
        for e in self._entries.values():
            lo, hi = np.searchsorted(indices, [e.start, e.stop])
            if hi > lo:
                yield e, indices[lo:hi] - e.start


def masked_sgd_step(store: ParamStore, lr: float, allowed) -> int:
    """Apply ``theta -= lr * grad`` on the global indices in ``allowed`` only.

    Returns the number of scalars updated. Everything outside ``allowed`` is
    left untouched at the byte level.
    """
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    idx = np.asarray(getattr(allowed, "indices", allowed), dtype=np.int64)
    if idx.size == 0:
        return 0
    idx = np.unique(idx)
    if idx[0] < 0 or idx[-1] >= store.total_count:
        raise IndexError(
            f"mask index out of range [0, {store.total_count}): {idx[0]}..{idx[-1]}"
        )
    count = 0
    for entry, local in store.segments(idx):
        flat_v = entry.value.reshape(-1)
        flat_g = entry.grad.reshape(-1)
        flat_v[local] -= lr * flat_g[local]
        count += local.size
    return count


# ---------------------------------------------------------------------------
# Primitive operations. Each forward returns (value, ctx); backward maps the
# output cotangent to one cotangent per input.


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    backward: Callable


def _check_broadcast(node, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(node, f"cannot broadcast {a.shape} with {b.shape}") from None


def _add_fwd(node, a, b):
    _check_broadcast(node, a, b)
    return a + b, None


def _add_bwd(node, ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_fwd(node, a, b):
    _check_broadcast(node, a, b)
    return a * b, None


def _mul_bwd(node, ctx, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(node, a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(node, f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(node, f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(node, ctx, g, a, b):
    return g @ b.T, a.T @ g


def _exp_fwd(node, a):
    out = np.exp(a)
    return out, out


def _exp_bwd(node, out, g, a):
    return (g * out,)


def _log_fwd(node, a):
    return np.log(a), None


def _log_bwd(node, ctx, g, a):
    return (g / a,)


def _tanh_fwd(node, a):
    out = np.tanh(a)
    return out, out


def _tanh_bwd(node, out, g, a):
    return (g * (1.0 - out * out),)


def _sum_fwd(node, a):
    axis = node.attrs.get("axis")
    keep = node.attrs.get("keepdims", False)
    return np.sum(a, axis=axis, keepdims=keep), None


def _sum_bwd(node, ctx, g, a):
    axis = node.attrs.get("axis")
    if axis is not None and not node.attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _softmax_fwd(node, a):
    axis = node.attrs.get("axis", -1)
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return out, out


def _softmax_bwd(node, out, g, a):
    axis = node.attrs.get("axis", -1)
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _log_softmax_fwd(node, a):
    axis = node.attrs.get("axis", -1)
    z = a - np.max(a, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    return out, np.exp(out)


def _log_softmax_bwd(node, probs, g, a):
    axis = node.attrs.get("axis", -1)
    return (g - probs * np.sum(g, axis=axis, keepdims=True),)


def _scale_fwd(node, a):
    return a * node.attrs["factor"], None


def _scale_bwd(node, ctx, g, a):
    return (g * node.attrs["factor"],)


def _div_fwd(node, a):
    return a / node.attrs["divisor"], None


def _div_bwd(node, ctx, g, a):
    return (g / node.attrs["divisor"],)


def _l2n_fwd(node, a):
    axis = node.attrs.get("axis", -1)
    norm = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ShapeError(node, "zero-norm vector cannot be L2-normalized")
    out = a / norm
    return out, (out, norm)


def _l2n_bwd(node, ctx, g, a):
    out, norm = ctx
    axis = node.attrs.get("axis", -1)
    return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)


def _concat_fwd(node, *parts):
    axis = node.attrs.get("axis", 0)
    try:
        return np.concatenate(parts, axis=axis), None
    except ValueError as exc:
        raise ShapeError(node, str(exc)) from None


def _concat_bwd(node, ctx, g, *parts):
    axis = node.attrs.get("axis", 0)
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _transpose_fwd(node, a):
    return a.T, None


def _transpose_bwd(node, ctx, g, a):
    return (g.T,)


OPS = {
    op.name: op
    for op in [
        Op("add", _add_fwd, _add_bwd),
        Op("multiply", _mul_fwd, _mul_bwd),
        Op("matmul", _matmul_fwd, _matmul_bwd),
        Op("exp", _exp_fwd, _exp_bwd),
        Op("log", _log_fwd, _log_bwd),
        Op("tanh", _tanh_fwd, _tanh_bwd),
        Op("sum", _sum_fwd, _sum_bwd),
        Op("softmax", _softmax_fwd, _softmax_bwd),
        Op("log_softmax", _log_softmax_fwd, _log_softmax_bwd),
        Op("scale", _scale_fwd, _scale_bwd),
        Op("scalar_divide", _div_fwd, _div_bwd),
        Op("l2_normalize", _l2n_fwd, _l2n_bwd),
        Op("concatenate", _concat_fwd, _concat_bwd),
        Op("transpose", _transpose_fwd, _transpose_bwd),
    ]
}

_LEAF = Op("leaf", None, None)


# ---------------------------------------------------------------------------
# Graph


class Node:
    """A vertex of a :class:`Graph`. Supports ``+ - * / @`` and unary minus."""

    __slots__ = ("graph", "index", "op", "inputs", "attrs", "kind", "name", "shape")

    def __init__(self, graph, index, op, inputs=(), attrs=None, kind="op", name=None, shape=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.kind = kind
        self.name = name
        self.shape = shape

    def __repr__(self):
        label = self.name or self.op.name
        return f"Node(#{self.index} {label})"

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return self.graph.apply("multiply", self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_divide(self, float(other))
        return NotImplemented

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    @property
    def T(self):
        return self.graph.apply("transpose", self)


class Graph:
    """A recorded computation. Nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: Node | None = None
        self._values: list[Tensor] | None = None
        self._ctx: list | None = None
        self._bindings: dict[str, Tensor] = {}

    def _push(self, **kw) -> Node:
        node = Node(self, len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def input(self, name: str, shape: Sequence[int | None] | None = None, value=None) -> Node:
        """Declare a named input leaf. ``None`` extents match any size."""
        node = self._push(op=_LEAF, kind="input", name=name, shape=None if shape is None else tuple(shape))
        if value is not None:
            self._bindings[name] = as_tensor(value)
        return node

    def constant(self, value) -> Node:
        node = self._push(op=_LEAF, kind="const", attrs={"value": as_tensor(value)})
        return node

    def param(self, store: ParamStore, name: str, trainable: bool = True) -> Node:
        if name not in store:
            raise KeyError(f"parameter {name!r} not in store")
        return self._push(op=_LEAF, kind="param", attrs={"store": store, "trainable": trainable}, name=name)

    def apply(self, op_name: str, *inputs: Node, **attrs) -> Node:
        for n in inputs:
            if n.graph is not self:
                raise NumericsError("cannot mix nodes from different graphs")
        return self._push(op=OPS[op_name], inputs=inputs, attrs=attrs)

    def set_output(self, node: Node) -> Node:
        self.output = node
        return node

    def value(self, node: Node) -> Tensor:
        if self._values is None:
            raise NumericsError("graph has not been evaluated")
        return self._values[node.index]


def evaluate(graph: Graph, inputs: Mapping[str, Tensor] | None = None) -> Tensor:
    """Run the forward pass; returns the output value and caches the tape."""
    if graph.output is None:
        if not graph.nodes:
            raise NumericsError("empty graph")
        graph.output = graph.nodes[-1]
    feed = dict(graph._bindings)
    if inputs:
        feed.update({k: as_tensor(v) for k, v in inputs.items()})
    values: list[Tensor] = [None] * len(graph.nodes)  # type: ignore[list-item]
    ctxs: list = [None] * len(graph.nodes)
    last = graph.output.index
    for node in graph.nodes[: last + 1]:
        if node.kind == "input":
            if node.name not in feed:
                raise ShapeError(node, f"missing value for input {node.name!r}")
            val = feed[node.name]
            if node.shape is not None:
                ok = len(node.shape) == val.ndim and all(
                    s is None or s == v for s, v in zip(node.shape, val.shape)
                )
                if not ok:
                    raise ShapeError(node, f"input {node.name!r} expects shape {node.shape}, got {val.shape}")
            values[node.index] = val
        elif node.kind == "const":
            values[node.index] = node.attrs["value"]
        elif node.kind == "param":
            values[node.index] = node.attrs["store"].value(node.name)
        else:
            args = [values[i.index] for i in node.inputs]
            values[node.index], ctxs[node.index] = node.op.forward(node, *args)
    graph._values = values
    graph._ctx = ctxs
    return values[last]


def gradient(graph: Graph, store: ParamStore | None = None) -> ParamStore | None:
    """Backpropagate from the scalar output, adding into the store's gradients.

    Gradients accumulate: call :meth:`ParamStore.zero_grad` between batches.
    Leaves created with ``trainable=False`` (or belonging to a store whose
    ``trainable`` flag is off) are left untouched.
    """
    if graph._values is None:
        raise NumericsError("evaluate() must be called before gradient()")
    out = graph.output
    out_val = graph._values[out.index]
    if out_val.size != 1:
        raise NumericsError(f"gradient needs a scalar output, got shape {out_val.shape}")
    cot: list[Tensor | None] = [None] * (out.index + 1)
    cot[out.index] = np.ones_like(out_val)
    for node in reversed(graph.nodes[: out.index + 1]):
        g = cot[node.index]
        if g is None:
            continue
        if node.kind == "param":
            target = node.attrs["store"]
            if store is not None and target is not store:
                continue
            if node.attrs["trainable"] and target.trainable:
                target.grad(node.name)[...] += g
            continue
        if node.kind != "op":
            continue
        args = [graph._values[i.index] for i in node.inputs]
        grads = node.op.backward(node, graph._ctx[node.index], g, *args)
        for parent, pg in zip(node.inputs, grads):
            if cot[parent.index] is None:
                cot[parent.index] = pg
            else:
                cot[parent.index] = cot[parent.index] + pg
    return store


def input_gradient(graph: Graph, name: str) -> Tensor:
    """Gradient of the scalar output with respect to a named input leaf."""
    if graph._values is None:
        raise NumericsError("evaluate() must be called before input_gradient()")
    out = graph.output
    cot: list[Tensor | None] = [None] * (out.index + 1)
    cot[out.index] = np.ones_like(graph._values[out.index])
    result = None
    for node in reversed(graph.nodes[: out.index + 1]):
        g = cot[node.index]
        if g is None:
            continue
        if node.kind == "input" and node.name == name:
            result = g if result is None else result + g
            continue
        if node.kind != "op":
            continue
        args = [graph._values[i.index] for i in node.inputs]
        for parent, pg in zip(node.inputs, node.op.backward(node, graph._ctx[node.index], g, *args)):
            cot[parent.index] = pg if cot[parent.index] is None else cot[parent.index] + pg
    if result is None:
        for node in graph.nodes:
            if node.kind == "input" and node.name == name:
                return np.zeros_like(graph._values[node.index])
        raise KeyError(name)
    return result


# ---------------------------------------------------------------------------
# Functional wrappers


def matmul(a: Node, b: Node) -> Node:
    return a.graph.apply("matmul", a, b)


def add(a: Node, b: Node) -> Node:
    return a.graph.apply("add", a, b)


def multiply(a: Node, b: Node) -> Node:
    return a.graph.apply("multiply", a, b)


def exp(a: Node) -> Node:
    return a.graph.apply("exp", a)


def log(a: Node) -> Node:
    return a.graph.apply("log", a)


def tanh(a: Node) -> Node:
    return a.graph.apply("tanh", a)


def sum(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    return a.graph.apply("sum", a, axis=axis, keepdims=keepdims)


def softmax(a: Node, axis: int = -1) -> Node:
    return a.graph.apply("softmax", a, axis=axis)


def log_softmax(a: Node, axis: int = -1) -> Node:
    return a.graph.apply("log_softmax", a, axis=axis)


def scale(a: Node, factor: float) -> Node:
    return a.graph.apply("scale", a, factor=float(factor))


def scalar_divide(a: Node, divisor: float) -> Node:
    if divisor == 0:
        raise ZeroDivisionError("scalar_divide by zero")
    return a.graph.apply("scalar_divide", a, divisor=float(divisor))


def l2_normalize(a: Node, axis: int = -1) -> Node:
    return a.graph.apply("l2_normalize", a, axis=axis)


def concatenate(parts: Iterable[Node], axis: int = 0) -> Node:
    parts = list(parts)
    return parts[0].graph.apply("concatenate", *parts, axis=axis)


def transpose(a: Node) -> Node:
    return a.graph.apply("transpose", a)
