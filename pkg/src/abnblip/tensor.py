"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every tensor wraps a C-contiguous ``numpy.ndarray`` of dtype float64.  Ops
record a closure on the output tensor; :func:`backward` walks the recorded
graph in reverse topological order, accumulates gradients and then frees the
graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12
MASK_VALUE = -1e30

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- graph walk


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every graph tensor, then free the graph."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate across backward calls
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    for node in order:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a: Tensor, p: float) -> Tensor:
    return _record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped below at 1e-12."""
    x = np.maximum(a.data, LOG_CLAMP)
    return _record(np.log(x), (a,), lambda g: (np.where(a.data > LOG_CLAMP, g / x, 0.0),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions / structure


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def mean_pool(a: Tensor, axis) -> Tensor:
    return mean(a, axis)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _record(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),)
    )


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.asarray(a.data[idx]).copy(), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0).reshape((indices.size,) + moved.shape[1:])
        flat = indices.reshape(-1)
        n = moved.shape[0]
        if n * flat.size <= 1 << 22:
            # scatter-add as a one-hot product: much faster than ufunc.at
            onehot = (np.arange(n)[:, None] == flat[None, :]).astype(g.dtype)
            moved[...] = (onehot @ gm.reshape(flat.size, -1)).reshape(moved.shape)
        else:
            np.add.at(moved, flat, gm)
        return (full,)

    return _record(np.take(a.data, indices, axis=axis), (a,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return take(table, ids, axis=0)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    flat = b.ndim == 2
    if flat:
        # (..., n) @ (n, m): one 2-D product instead of a broadcast batch
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalized ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm expects gamma/beta of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw)


def sample_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all non-batch axes; per-channel (last axis) affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"sample_norm expects gamma/beta of shape ({d},)")
    red = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=red, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        outer = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=outer)
        dbeta = g.sum(axis=outer)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=red, keepdims=True) - xhat * (gx * xhat).mean(axis=red, keepdims=True))
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-24) -> Tensor:
    norm = sqrt(add(sum_(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


# ---------------------------------------------------------------- 3D convolution


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    """3x3x3 convolution with zero padding 1 on channels-last input.

    ``x`` is (B, D, H, W, Cin) and ``w`` is (Cout, Cin, 3, 3, 3).  Output
    extents are ``ceil(n / stride)``.
    """
    B, D, H, W, C = x.shape
    cout, cin, kd, kh, kw = w.shape
    if cin != C or (kd, kh, kw) != (3, 3, 3):
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    s = stride
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    Do, Ho, Wo = win.shape[1:4]
    cols = win.reshape(B * Do * Ho * Wo, C * 27)
    wmat = w.data.reshape(cout, C * 27).T
    out = (cols @ wmat).reshape(B, Do, Ho, Wo, cout)
    if b is not None:
        out = out + b.data

    def bw(g):
        gf = g.reshape(-1, cout)
        gw = (cols.T @ gf).T.reshape(w.shape)
        dcols = (gf @ wmat.T).reshape(B, Do, Ho, Wo, C, 3, 3, 3)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    dxp[:, i : i + s * Do : s, j : j + s * Ho : s, k : k + s * Wo : s, :] += dcols[..., i, j, k]
        gx = dxp[:, 1:-1, 1:-1, 1:-1, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)

