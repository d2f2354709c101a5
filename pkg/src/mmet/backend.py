"""Dense tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor`; when any input requires a gradient (and
recording is on) the op also stores a closure mapping the output gradient to
input gradients. :func:`grad` walks that graph backwards.

Broadcasting is limited to a trailing-suffix rule: one operand's shape must be
a suffix of the other's (bias vectors, scalar coefficients). Anything else is a
:class:`ShapeError`.

Outside of recording (``with no_grad():``) matrix products go through
:func:`mmet.kernels.matmul_rows`, so a row's result does not depend on how many
rows were evaluated together.
"""

from __future__ import annotations

import json
import math
import threading
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import kernels

CHECKPOINT_FORMAT = "mmet-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()
_default_dtype = np.float64


def set_precision(bits: int) -> None:
    """Select float64 (default) or float32 for new parameters and constants."""
    global _default_dtype
    if bits == 64:
        _default_dtype = np.float64
    elif bits == 32:
        _default_dtype = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def default_dtype():
    return _default_dtype


def is_recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_grad():
    prev = is_recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, key: index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """A leaf tensor that always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=_default_dtype), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single pass; non-finite values propagate into the sum
    if not math.isfinite(float(np.sum(data))) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _result(data, op: str, parents: tuple, backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _suffix_compatible(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return long_[len(long_) - len(short):] == short


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _binary(a, b, op: str):
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    return _result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _result(out, "div", (a, b), backward)


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.matmul(x, y) if is_recording() else kernels.matmul_rows(x, y)


def matmul(a, b) -> Tensor:
    """``(..., M, K) @ (K, N)`` or batched ``(..., M, K) @ (..., K, N)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes differ {a.shape} and {b.shape}")
    out = _mm(a.data, b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, "matmul", (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tuple(ts), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (used for node permutations)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * (axis % a.ndim) + (idx,), g)
        return (ga,)

    return _result(out, "take", (a,), backward)


def index(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _result(np.array(out, copy=True), "index", (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), "reduce_sum", (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (a,), backward)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, "layernorm", (a,), backward)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params) -> dict:
    """Gradients of scalar ``loss`` w.r.t. ``params``.

    ``params`` is a mapping name -> Parameter (or any iterable of Parameters,
    keyed by the tensors themselves). Unconnected parameters get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"grad requires a scalar loss, got shape {loss.shape}")
    items = list(params.items()) if isinstance(params, dict) else [(p, p) for p in params]
    result = {key: np.zeros_like(p.data) for key, p in items}
    if not loss.requires_grad:
        return result
    wanted = {id(p): key for key, p in items}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.backward_fn is None:
            continue
        del grads[id(node)]
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for pid, key in wanted.items():
        if pid in grads:
            result[key] = grads[pid].reshape(result[key].shape)
    for key, g in result.items():
        _check_finite(g, f"gradient of {key}")
    return result


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write ``{name: array}`` plus metadata as versioned JSON."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an mmet checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return params, doc.get("meta", {})
