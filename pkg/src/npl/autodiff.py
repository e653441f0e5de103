"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-graph engine: every operation records a ``Node`` holding
its value, its parents, and a closure that maps the output gradient to
parent gradients.  Graphs are rebuilt from scratch on every call, so
sequence lengths and context-set sizes may change freely between steps.

Broadcasting is explicit: elementwise ops require identical shapes and
``broadcast_to`` is the only way to expand an array.  ``matmul`` follows
stacked-matrix semantics (identical leading dims, or one rank-2 operand
shared across the stack).  Gradient flow is deterministic: the same graph
with the same values produces bit-identical gradients.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Node",
    "ParamStore",
    "ShapeError",
    "no_grad",
    "constant",
    "record",
    "backprop",
    "finite_difference_check",
    "save_params",
    "load_params",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "matmul",
    "concat",
    "narrow",
    "sum_reduce",
    "mean_reduce",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "softplus",
    "softmax",
    "square",
    "sqrt",
    "broadcast_to",
    "reshape",
    "transpose",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested op."""


class no_grad:
    """Context manager that records values only, skipping graph bookkeeping.

    Useful for evaluation passes and finite-difference probes where the
    backward graph would be dead weight.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Node:
    """One vertex of the computation graph.

    ``value`` is a float64 ndarray, treated as immutable once recorded.
    ``grad`` is filled in by :func:`backprop` and has the same shape as
    ``value``.  Parameter leaves remember the ``ParamStore`` name they came
    from so accumulated gradients can be routed back to the store.
    """

    __slots__ = ("value", "op", "parents", "grad", "_backward", "param_name")

    def __init__(self, value, op="leaf", parents=(), backward=None, param_name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.grad = None
        self._backward = backward
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # Operator sugar.  Scalars go through scale/shift; Nodes must match shape.
    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    """Wrap an array (or scalar) as a leaf node with no gradient history."""
    return Node(np.asarray(value, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, parents, backward) -> Node:
    if not _GRAD_ENABLED:
        return Node(value, op)
    return Node(value, op, parents, backward)


def _same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: operand shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("add", a, b)
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("sub", a, b)
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, "div", (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, k: float) -> Node:
    """Multiply by a python scalar constant."""
    a = _as_node(a)
    k = float(k)
    return _make(a.value * k, "scale", (a,), lambda g: (g * k,))


def shift(a, k: float) -> Node:
    """Add a python scalar constant elementwise."""
    a = _as_node(a)
    return _make(a.value + float(k), "shift", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 2:
        raise ShapeError(f"matmul: need vector-or-matrix @ matrix, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {av.shape} @ {bv.shape}")
    if av.ndim == 1 and bv.ndim != 2:
        raise ShapeError(f"matmul: vector lhs needs a rank-2 rhs, got {av.shape} @ {bv.shape}")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ for {av.shape} @ {bv.shape}")

    out = av @ bv

    if av.ndim == 1:
        def backward(g):
            return g @ bv.T, av[:, None] * g[None, :]
    else:
        def backward(g):
            da = g @ np.swapaxes(bv, -1, -2)
            db = np.swapaxes(av, -1, -2) @ g
            if da.shape != av.shape:  # b was stacked, a shared
                da = da.sum(axis=tuple(range(da.ndim - av.ndim)))
            if db.shape != bv.shape:  # a was stacked, b shared
                db = db.sum(axis=tuple(range(db.ndim - bv.ndim)))
            return da, db

    return _make(out, "matmul", (a, b), backward)


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [_as_node(x) for x in xs]
    if not xs:
        raise ShapeError("concat: need at least one operand")
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return _make(out, "concat", tuple(xs), backward)


def narrow(x, axis: int, start: int, length: int) -> Node:
    """Contiguous slice of ``length`` entries along ``axis`` (op tag: slice)."""
    x = _as_node(x)
    n = x.value.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeError(f"slice: [{start}:{start + length}] out of range for axis {axis} of {x.value.shape}")
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = x.value[index]

    def backward(g):
        full = np.zeros_like(x.value)
        full[index] = g
        return (full,)

    return _make(out, "slice", (x,), backward)


def sum_reduce(x, axis=None, keepdims: bool = False) -> Node:
    x = _as_node(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum-reduce", (x,), backward)


def mean_reduce(x, axis=None, keepdims: bool = False) -> Node:
    x = _as_node(x)
    out = x.value.mean(axis=axis, keepdims=keepdims)
    shape = x.value.shape
    count = x.value.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / count,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _make(np.asarray(out), "mean-reduce", (x,), backward)


def broadcast_to(x, shape) -> Node:
    """Explicitly broadcast to ``shape`` (trailing-aligned, numpy rules)."""
    x = _as_node(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot expand {x.value.shape} to {shape}") from e
    src = x.value.shape
    pad = len(shape) - len(src)
    summed_axes = tuple(range(pad)) + tuple(
        pad + i for i, s in enumerate(src) if s == 1 and shape[pad + i] != 1
    )
    kept = tuple(i for i, s in enumerate(src) if s == 1 and shape[pad + i] != 1)

    def backward(g):
        if summed_axes:
            g = g.sum(axis=summed_axes)
            if kept:
                g = np.expand_dims(g, kept)
        g = g.reshape(src)
        return (np.ascontiguousarray(g),)

    return _make(np.ascontiguousarray(out), "broadcast", (x,), backward)


def reshape(x, shape) -> Node:
    x = _as_node(x)
    shape = tuple(shape)
    out = x.value.reshape(shape)
    src = x.value.shape
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Node:
    x = _as_node(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.value.transpose(axes))
    return _make(out, "transpose", (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


# ---------------------------------------------------------------------------
# nonlinearities


def exp(x) -> Node:
    x = _as_node(x)
    out = np.exp(x.value)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Node:
    x = _as_node(x)
    xv = x.value
    return _make(np.log(xv), "log", (x,), lambda g: (g / xv,))


def tanh(x) -> Node:
    x = _as_node(x)
    out = np.tanh(x.value)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Node:
    x = _as_node(x)
    out = expit(x.value)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Node:
    x = _as_node(x)
    xv = x.value
    out = np.maximum(xv, 0.0)
    return _make(out, "relu", (x,), lambda g: (g * (xv > 0.0),))


def softplus(x) -> Node:
    x = _as_node(x)
    xv = x.value
    out = np.logaddexp(0.0, xv)
    return _make(out, "softplus", (x,), lambda g: (g * expit(xv),))


def square(x) -> Node:
    x = _as_node(x)
    xv = x.value
    return _make(xv * xv, "square", (x,), lambda g: (g * (2.0 * xv),))


def sqrt(x) -> Node:
    x = _as_node(x)
    out = np.sqrt(x.value)
    return _make(out, "sqrt", (x,), lambda g: (g * (0.5 / out),))


def softmax(x, axis: int = -1) -> Node:
    x = _as_node(x)
    xv = x.value
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax", (x,), backward)


# ---------------------------------------------------------------------------
# tag-based dispatch

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "shift": shift,
    "matmul": matmul,
    "concat": concat,
    "slice": narrow,
    "sum-reduce": sum_reduce,
    "mean-reduce": mean_reduce,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "softmax": softmax,
    "square": square,
    "sqrt": sqrt,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
}


def record(op: str, inputs: Iterable, **kwargs) -> Node:
    """Record one op by tag.  ``inputs`` are Nodes or array-likes; extra
    arguments (axis, shape, ...) go through ``kwargs``."""
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    fn = _OPS[op]
    inputs = list(inputs)
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backprop(loss: Node, store: "ParamStore | None" = None) -> dict:
    """Backpropagate from a scalar loss.

    Fills ``grad`` on every reachable node.  When ``store`` is given, the
    gradients of parameter leaves are accumulated into the store (summed
    over repeated uses) and a complete name -> gradient map is returned;
    parameters the loss never touched get zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {loss.value.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            # Accumulation allocates instead of mutating so that gradient
            # arrays shared between siblings are never aliased.
            parent.grad = pg if parent.grad is None else parent.grad + pg
    if store is None:
        return {}
    for node in order:
        if node.param_name is not None and node.grad is not None:
            store._grads[node.param_name] += node.grad
    return {name: store._grads[name].copy() for name in store.names()}


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameter arrays with per-name gradient accumulators."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list:
        return sorted(self._values)

    def get(self, name: str) -> np.ndarray:
        """The live parameter array (mutated in place by optimizers)."""
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def leaf(self, name: str) -> Node:
        """A fresh graph leaf for this parameter."""
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        return Node(self._values[name], "param", param_name=name if _GRAD_ENABLED else None)

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_entries(self) -> int:
        return sum(v.size for v in self._values.values())


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f: Callable[[ParamStore], Node], store: ParamStore, eps: float = 1e-5) -> float:
    """Compare backprop gradients of ``f`` against central differences.

    ``f`` must map the store to a scalar Node and be deterministic (freeze
    any noise before calling).  Returns the worst relative error
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` over every
    entry of every parameter.
    """
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("finite_difference_check: non-finite loss")
    analytic = backprop(loss, store)
    worst = 0.0
    for name in store.names():
        flat = store.get(name).reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = float(f(store).value)
            flat[i] = orig - eps
            with no_grad():
                lo = float(f(store).value)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"finite_difference_check: non-finite probe at {name}[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def directional_gradient_check(f: Callable[[ParamStore], Node], store: ParamStore,
                               eps: float = 1e-5, n_directions: int = 8,
                               rng: np.random.Generator | None = None) -> float:
    """Compare backprop gradients of ``f`` against finite differences along
    random unit directions in the full parameter space.

    Per-coordinate central differences are blind wherever a coordinate's
    gradient falls below the evaluation noise floor (a few ulps of |f|
    divided by eps); deep composites always contain such coordinates, so
    ``finite_difference_check`` over a whole model reports noise instead of
    correctness there.  Projecting onto a random direction aggregates the
    gradient into one well-conditioned scalar per probe: numeric
    (f(p + eps d) - f(p - eps d)) / (2 eps) against analytic g . d.  Any
    fixed error component in g is detected with probability one.  Returns
    the worst relative error over directions (same normalization as
    ``finite_difference_check``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("directional_gradient_check: non-finite loss")
    analytic = backprop(loss, store)
    names = store.names()
    originals = {name: store.get(name).copy() for name in names}
    worst = 0.0
    for _ in range(n_directions):
        direction = {name: rng.standard_normal(originals[name].shape) for name in names}
        norm = math.sqrt(sum(float((d * d).sum()) for d in direction.values()))
        slope = sum(float((analytic[name] * direction[name]).sum()) for name in names) / norm
        probes = []
        for sign in (1.0, -1.0):
            for name in names:
                store.get(name)[...] = originals[name] + sign * (eps / norm) * direction[name]
            with no_grad():
                value = float(f(store).value)
            if not np.isfinite(value):
                raise FloatingPointError("directional_gradient_check: non-finite probe")
            probes.append(value)
        numeric = (probes[0] - probes[1]) / (2.0 * eps)
        err = abs(slope - numeric) / max(1e-8, abs(slope) + abs(numeric))
        if err > worst:
            worst = err
    for name in names:
        store.get(name)[...] = originals[name]
    return worst


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"NPL1"


def dumps_params(store: ParamStore) -> bytes:
    """Serialize all parameters in sorted-name order.

    Layout: magic ``NPL1``; u32 LE count; then per parameter: u32 LE name
    length, UTF-8 name, u32 LE rank, u64 LE dims, f64 LE values.
    """
    chunks = [MAGIC, struct.pack("<I", len(store))]
    for name in store.names():
        arr = store.get(name)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def save_params(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(store))


def loads_params(data: bytes, offset: int = 0) -> ParamStore:
    """Parse a parameter block from bytes starting at ``offset``."""
    if data[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad parameter-file magic {data[offset:offset + 4]!r}")
    pos = offset + 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos) if rank else ()
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        store.add(name, values)
    return store


def load_params(path) -> ParamStore:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
