"""Dense tensors with a tape-based reverse-mode autodiff.

Every primitive computes its value with numpy and, when a tape is active and
at least one input requires a gradient, appends a node holding the
vector-Jacobian product closure. ``Tape.backward`` walks the nodes in
reverse recording order, which is a valid reverse topological order because
a node can only consume tensors that already exist.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-7
LOGIT_CLAMP = 30.0

_dtype = np.float32
_tapes: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch newly created tensors to ``float32`` or ``float64``."""
    global _dtype
    previous = _dtype
    _dtype = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == _dtype:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "tracked")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        # snapshot so later requires_grad changes do not alter this record
        self.tracked = tuple(t.requires_grad for t in inputs)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; ops executed inside the block are recorded.
    A tape supports exactly one ``backward`` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("backward: tape already consumed; run a new forward pass")
        if not self.nodes:
            raise RuntimeError("backward: tape is empty")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, tracked, gi in zip(node.inputs, node.tracked, node.vjp(g)):
                if gi is None or not tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = inp
        result = {}
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                continue
            # only leaves remain here: intermediate grads were popped above
            t.grad = g
            result[t] = g
        self.nodes.clear()
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _tapes:
        _tapes[-1].nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.clip(x.data, -LOGIT_CLAMP, LOGIT_CLAMP)
    y = 1.0 / (1.0 + np.exp(-z))
    inside = np.abs(x.data) <= LOGIT_CLAMP
    return _record(y, (x,), lambda g: (g * y * (1.0 - y) * inside,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(np.minimum(x.data, LOGIT_CLAMP))
    inside = x.data <= LOGIT_CLAMP
    return _record(y, (x,), lambda g: (g * y * inside,))


def log(x) -> Tensor:
    """Natural log with the input clamped to ``[LOG_EPS, inf)``."""
    x = as_tensor(x)
    safe = np.maximum(x.data, LOG_EPS)
    inside = x.data >= LOG_EPS
    return _record(np.log(safe), (x,), lambda g: (g / safe * inside,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x) -> Tensor:
    """Softmax over the last axis, logits clamped to +-30."""
    x = as_tensor(x)
    z = np.clip(x.data, -LOGIT_CLAMP, LOGIT_CLAMP)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    inside = np.abs(x.data) <= LOGIT_CLAMP

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) * inside,)

    return _record(y, (x,), vjp)


def softplus(x) -> Tensor:
    return log(add(exp(x), 1.0))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- structural

def broadcast(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    src = x.shape
    return _record(y.copy(), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(y, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None
    n = len(tensors)
    return _record(y, tensors, lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for a 2-D table and integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather-rows", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather-rows: id out of range [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), vjp)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _record(y, (x,), lambda g: (g.reshape(src),))


def astype(x, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input's dtype."""
    x = as_tensor(x)
    src = x.data.dtype
    out = Tensor(0.0, requires_grad=x.requires_grad)
    out.data = x.data.astype(dtype)
    if x.requires_grad and _tapes:
        _tapes[-1].nodes.append(_Node(out, (x,), lambda g: (g.astype(src),)))
    return out


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax-lastdim": softmax,
    "concat": concat,
    "gather-rows": gather_rows,
    "sum": sum,
    "mean": mean,
    "broadcast": broadcast,
    "clip": clip,
    "stack": stack,
    "reshape": reshape,
    "getitem": getitem,
    "astype": astype,
}


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by its op-kind name."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op-kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


PRIMITIVE_KINDS = tuple(_PRIMITIVES)
