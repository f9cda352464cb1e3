"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape`
whenever one of their inputs requires a gradient.  Outside a tape nothing
is recorded, which is the inference path.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_TAPES: list["GradTape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An immutable n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def as_float32(self):
        """Detached 32-bit copy (storage and inference only)."""
        return Tensor(self.data.astype(np.float32))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Records differentiable operations and replays them in reverse.

    Usage::

        with GradTape() as tape:
            tape.watch(params)
            loss = f(params)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, params):
        """Register a ``{name: Tensor}`` mapping as the parameters of interest."""
        for name, t in params.items():
            t.requires_grad = True
            self.params[name] = t

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data, dtype=np.float64) if g is None else g
        return out


def backward(tape, loss):
    return tape.backward(loss)


def _make(data, parents, backward):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    # only leading-axis broadcasting and singleton axes; no implicit rank games
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def gelu(x):
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data, dtype=np.float64).reshape(-1)
    shape = x.shape
    out = kernels.gelu_fwd(flat).reshape(shape)

    def bw(g):
        gf = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
        return (kernels.gelu_bwd(gf, flat).reshape(shape),)

    return _make(out, (x,), bw)


# -- shape ------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = not any(isinstance(i, (np.ndarray, list)) for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=np.float64)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(out, tuple(tensors), bw)


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, old),))


# -- reductions -------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(x.shape[a] for a in axes)
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def cumsum(x, axis):
    x = as_tensor(x)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), bw)


def min_select(x, axis):
    """Minimum along ``axis``; the gradient flows to the selected entry only."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmin(x.data, axis=axis), axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis)
        return (full,)

    return _make(np.take_along_axis(x.data, idx, axis).squeeze(axis), (x,), bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis; ``w`` has shape ``[in, out]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear bias shape {b.shape} does not match weight {w.shape}")
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


# -- normalisation / attention primitives -----------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} vs input {x.shape}")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data, dtype=np.float64).reshape(-1, d)
    gd = np.ascontiguousarray(gain.data, dtype=np.float64)
    bd = np.ascontiguousarray(bias.data, dtype=np.float64)
    out, xhat, rstd = kernels.layer_norm_fwd(x2, gd, bd, eps)

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=np.float64).reshape(-1, d)
        gx, gg, gb = kernels.layer_norm_bwd(g2, xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _make(np.asarray(out).reshape(shape), (x, gain, bias), bw)


def softmax(x, axis=-1, valid=None):
    """Softmax along ``axis``.

    ``valid`` is a boolean array broadcastable to ``x``; invalid positions get
    probability exactly 0 and rows with no valid entry are all zeros.
    """
    x = as_tensor(x)
    moved = np.moveaxis(x.data, axis, -1)
    shape = moved.shape
    x2 = np.ascontiguousarray(moved, dtype=np.float64).reshape(-1, shape[-1])
    if valid is None:
        v2 = np.ones(x2.shape, dtype=np.uint8)
    else:
        v = np.moveaxis(np.broadcast_to(np.asarray(valid, dtype=bool), x.shape), axis, -1)
        v2 = np.ascontiguousarray(v, dtype=np.uint8).reshape(x2.shape)
    y2 = np.asarray(kernels.softmax_fwd(x2, v2))
    out = np.moveaxis(y2.reshape(shape), -1, axis)

    def bw(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1), dtype=np.float64).reshape(y2.shape)
        gx = np.asarray(kernels.softmax_bwd(g2, y2))
        return (np.moveaxis(gx.reshape(shape), -1, axis),)

    return _make(out, (x,), bw)
