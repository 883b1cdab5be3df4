"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the primitives the recurrent and attention models need are provided.
Broadcasting is restricted to three cases: scalar with tensor, equal shapes,
and a lower-rank operand whose shape is a trailing suffix of the other
(bias rows).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, EmptySupportError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data)
        arr = arr.astype(np.longdouble if arr.dtype == np.longdouble else np.float64, copy=False)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite output from {op}")
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators ------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_kind(a_shape, b_shape):
    if a_shape == b_shape:
        return "same"
    if len(b_shape) == 0:
        return "b_scalar"
    if len(a_shape) == 0:
        return "a_scalar"
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return "b_suffix"
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return "a_suffix"
    raise DimensionError(f"incompatible shapes {a_shape} and {b_shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    return g.reshape(shape)


def _binary(a, b, fwd, grad_a, grad_b, op):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out_data = fwd(a.data, b.data)

    def backward(g):
        return (
            _reduce_to(grad_a(g, a.data, b.data), a.shape) if a.requires_grad else None,
            _reduce_to(grad_b(g, a.data, b.data), b.shape) if b.requires_grad else None,
        )

    return Tensor._result(out_data, (a, b), backward, op)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div"
    )


def _unary(x, out_data, local_grad, op):
    x = as_tensor(x)

    def backward(g):
        return (g * local_grad(),)

    return Tensor._result(out_data, (x,), backward, op)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y, "tanh")


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _unary(x, y, lambda: y * (1.0 - y), "sigmoid")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda: y, "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def softplus(x):
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    return _unary(x, y, lambda: _sigmoid(x.data), "softplus")


def clip(x, lo, hi):
    """Clamp into [lo, hi]; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    y = np.clip(x.data, lo, hi)
    return _unary(x, y, lambda: ((x.data >= lo) & (x.data <= hi)).astype(np.float64), "clip")


def elementwise(op, *inputs):
    """Dispatch by name: add, mul, tanh, sigmoid, exp."""
    table = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "exp": exp}
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


def matmul(a, b):
    """Matrix product; leading batch extents must agree, or ``b`` is a shared 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and not (b.ndim == 2 and a.ndim > 2):
        raise DimensionError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def tsum(x, axis=None):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward, "sum")


def tmean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index):
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (x,), backward, "getitem")


def take_rows(table, idx):
    """Embedding lookup: ``table[idx]`` with shape ``idx.shape + table.shape[1:]``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return Tensor._result(out, (table,), backward, "take_rows")


def gather_last(x, idx):
    """Pick ``x[..., idx[...]]``; ``idx`` has shape ``x.shape[:-1]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"gather index shape {idx.shape} vs tensor {x.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._result(out, (x,), backward, "gather_last")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return Tensor._result(out, tensors, backward, "stack")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor._result(out, tensors, backward, "concat")


def cumsum(x, axis=-1, reverse=False):
    x = as_tensor(x)
    if reverse:
        out = np.flip(np.cumsum(np.flip(x.data, axis), axis), axis)
    else:
        out = np.cumsum(x.data, axis)

    def backward(g):
        if reverse:
            return (np.cumsum(g, axis),)
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return Tensor._result(out, (x,), backward, "cumsum")


def masked_softmax(logits, mask, axis=-1, allow_empty=False):
    """Softmax over positions where ``mask`` is true; masked entries are exactly 0.

    With ``allow_empty`` a slice with no support yields all zeros instead of
    raising.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    support = mask.any(axis=axis, keepdims=True)
    if not allow_empty and not np.all(support):
        raise EmptySupportError("masked_softmax: no unmasked position")
    z = np.where(mask, logits.data, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(support, zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.where(support, e / np.where(denom > 0, denom, 1.0), 0.0)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (logits,), backward, "masked_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            n = x.shape[-1]
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        if gamma.requires_grad:
            gg = _reduce_to(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _reduce_to(g, beta.shape)
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), backward, "layer_norm")


class ComputationRecord:
    """Executed ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        order, seen = [], set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        self.ops = order

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    record = ComputationRecord(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
